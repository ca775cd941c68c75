"""Monte Carlo dropout: determinism, statistics, comparison report."""

import math

import numpy as np
import pytest
from scipy import stats

from circuq import DegenerateSampleError, McdConfig, build_manual, mcd_infer, mcd_vs_tdi_report
from circuq.mcd import _mask_generator
from circuq.moments import DropoutConfig, tdi_pass
from circuq.structures import random_evidence, random_tree_circuit

from conftest import rel_err


class TestDeterminismAndDegeneracy:
    def test_p_zero_is_deterministic_forward(self, two_leaf_sum):
        res = mcd_infer(two_leaf_sum, [0.0], McdConfig(p=0.0, num_passes=50, rng_seed=1))
        assert res.sample_mean[0] == pytest.approx(0.4, rel=1e-12)
        assert res.sample_variance[0] == 0.0

    def test_fixed_seed_bit_identical(self, two_leaf_sum):
        a = mcd_infer(two_leaf_sum, [0.0], McdConfig(0.2, 5000, rng_seed=7, keep_samples=True))
        b = mcd_infer(two_leaf_sum, [0.0], McdConfig(0.2, 5000, rng_seed=7, keep_samples=True))
        assert np.array_equal(a.raw_samples, b.raw_samples)
        assert np.array_equal(a.posterior_sample_variance, b.posterior_sample_variance)

    def test_different_seed_differs(self, two_leaf_sum):
        a = mcd_infer(two_leaf_sum, [0.0], McdConfig(0.2, 1000, rng_seed=7))
        b = mcd_infer(two_leaf_sum, [0.0], McdConfig(0.2, 1000, rng_seed=8))
        assert a.sample_mean[0] != b.sample_mean[0]

    def test_all_dropped_event_yields_zero_value(self):
        # single-edge sum at p = 0.5: about half the passes evaluate to zero
        spec = "g gaussian 0 0.0 1.0\ns sum 1.0 g\nroot s"
        c = build_manual(spec)
        res = mcd_infer(c, [0.0], McdConfig(0.5, 4000, rng_seed=3, keep_samples=True))
        zero_frac = float((res.raw_samples[:, 0] == 0.0).mean())
        assert 0.45 < zero_frac < 0.55

    def test_degenerate_sample_error(self):
        spec = """
        a categorical 0 1.0 0.0
        b categorical 0 1.0 0.0
        root a b
        """
        c = build_manual(spec)
        with pytest.raises(DegenerateSampleError):
            mcd_infer(c, [1.0], McdConfig(0.1, 10, rng_seed=0))


class TestStatistics:
    def test_two_leaf_sum_frozen_statistics(self, two_leaf_sum):
        """L = 200000 at q = 0.8: sample mean within 1% of 0.32, variance
        within 3% of 0.016 (tolerances from the binomial standard error)."""
        res = mcd_infer(two_leaf_sum, [0.0], McdConfig(0.2, 200_000, rng_seed=5))
        assert rel_err(res.sample_mean[0], 0.32) < 0.01
        assert rel_err(res.sample_variance[0], 0.016) < 0.03

    def test_convergence_to_closed_form_on_trees(self):
        rng = np.random.default_rng(77)
        for _ in range(6):
            c = random_tree_circuit(rng, max_sum_edges=8)
            ev = random_evidence(rng, c)
            frame = tdi_pass(c, ev, DropoutConfig.with_p(0.1))
            r = c.roots[0]
            e = math.exp(frame.log_expectation[r])
            res = mcd_infer(c, ev, McdConfig(0.1, 100_000, rng_seed=11))
            assert rel_err(res.sample_mean[0], e) < 0.02

    def test_mask_independence_chi_square(self, two_leaf_sum):
        """Mask bits across passes and edges behave like independent draws."""
        cfg = McdConfig(0.3, 20_000, rng_seed=9)
        rng = _mask_generator(cfg.rng_seed)
        keep = rng.random((2, cfg.num_passes)) >= cfg.p
        # 2x2 contingency table between the two edges
        table = np.zeros((2, 2))
        for i in (0, 1):
            for j in (0, 1):
                table[i, j] = np.sum((keep[0] == i) & (keep[1] == j))
        chi2, p_value = stats.chi2_contingency(table)[:2]
        assert p_value > 0.01
        # lag-1 independence across passes on edge 0
        table = np.zeros((2, 2))
        a, b = keep[0, :-1], keep[0, 1:]
        for i in (0, 1):
            for j in (0, 1):
                table[i, j] = np.sum((a == i) & (b == j))
        chi2, p_value = stats.chi2_contingency(table)[:2]
        assert p_value > 0.01
        # marginal keep rate close to q
        assert abs(keep.mean() - 0.7) < 0.01


class TestComparisonReport:
    def test_report_shape_and_timing(self, two_leaf_sum, tmp_path):
        X = np.zeros((3, 1))
        table = mcd_vs_tdi_report(two_leaf_sum_2class(), X, p=0.1, num_passes=100, rng_seed=0)
        assert table.tdi_passes == 1
        assert table.mcd_passes == 100
        assert len(table.rows) == 3 * 2
        out = tmp_path / "cmp.csv"
        table.write_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "sample_id,class,tdi_mean,tdi_var,mcd_mean,mcd_var"
        assert lines[-1].startswith("# timing,")

    def test_p_zero_gaps_are_zero(self):
        c = two_leaf_sum_2class()
        X = np.zeros((2, 1))
        table = mcd_vs_tdi_report(c, X, p=0.0, num_passes=10, rng_seed=0)
        for row in table.rows:
            assert row.tdi_mean == pytest.approx(row.mcd_mean, abs=1e-12)
            assert row.tdi_var == row.mcd_var == 0.0

    def test_posterior_gap_small_at_large_L(self):
        c = two_leaf_sum_2class()
        X = np.zeros((2, 1))
        table = mcd_vs_tdi_report(c, X, p=0.1, num_passes=100_000, rng_seed=4)
        assert table.mean_abs_gap() < 0.01


def two_leaf_sum_2class():
    return build_manual(
        """
        a1 categorical 0 0.5 0.5
        b1 categorical 0 0.25 0.75
        s1 sum 0.6 a1 0.4 b1
        a2 categorical 0 0.7 0.3
        b2 categorical 0 0.4 0.6
        s2 sum 0.5 a2 0.5 b2
        root s1 s2
        """
    )
