"""Circuit model: validation, log-space inference, serialization."""

import math

import numpy as np
import pytest

from circuq import (
    Circuit,
    Evidence,
    GaussianLeaf,
    ProductNode,
    SumNode,
    ParameterError,
    SerializationError,
    ShapeError,
    build_manual,
    build_rat,
    deserialize,
    log_likelihood,
    log_likelihood_batch,
    RatConfig,
    serialize,
    validate,
)
from circuq.enumeration import linear_forward
from circuq.structures import random_tree_circuit, random_dag_circuit, random_evidence

from conftest import rel_err


def gaussian(v=0, mean=0.0, log_std=0.0):
    return GaussianLeaf(v, mean, log_std)


class TestValidate:
    def test_single_leaf_is_valid(self):
        c = Circuit([gaussian()], roots=[0], num_variables=1, log_class_priors=np.zeros(1))
        assert validate(c).ok

    def test_decomposability_violation(self):
        nodes = [gaussian(0), gaussian(0), ProductNode([0, 1])]
        c = Circuit(nodes, [2], 1, np.zeros(1))
        report = validate(c)
        assert not report.ok
        assert any(v.constraint == "decomposability" and v.node == 2 for v in report.violations)

    def test_smoothness_violation(self):
        nodes = [gaussian(0), gaussian(1), SumNode([0, 1], np.log([0.5, 0.5])),
                 gaussian(0), ProductNode([2, 3])]
        # the sum's children have scopes {0} and {1}
        c = Circuit(nodes, [2], 2, np.zeros(1))
        report = validate(c)
        assert any(v.constraint == "smoothness" and v.node == 2 for v in report.violations)

    def test_weight_normalization(self):
        nodes = [gaussian(0), gaussian(0), SumNode([0, 1], np.log([0.5, 0.4]))]
        c = Circuit(nodes, [2], 1, np.zeros(1))
        assert any(v.constraint == "weight-normalization" for v in validate(c).violations)

    def test_topological_order(self):
        nodes = [SumNode([1, 2], np.log([0.5, 0.5])), gaussian(0), gaussian(0)]
        c = Circuit(nodes, [0], 1, np.zeros(1))
        assert any(v.constraint == "topological-order" for v in validate(c).violations)

    def test_root_scope_must_be_full(self):
        nodes = [gaussian(0)]
        c = Circuit(nodes, [0], 2, np.zeros(1))
        assert any(v.constraint == "root-scope" for v in validate(c).violations)

    def test_prior_normalization(self):
        nodes = [gaussian(0), gaussian(0)]
        c = Circuit(nodes, [0, 1], 1, np.log([0.6, 0.6]))
        assert any(v.constraint == "prior-normalization" for v in validate(c).violations)


class TestLogLikelihood:
    def test_standard_normal_at_mode(self):
        c = Circuit([gaussian()], [0], 1, np.zeros(1))
        got = log_likelihood(c, [0.0])[0]
        assert got == pytest.approx(math.log(1 / math.sqrt(2 * math.pi)), abs=1e-12)
        assert got == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_fully_marginalized_is_zero(self, three_var_tree):
        got = log_likelihood(three_var_tree, Evidence.marginal_all(3))
        assert abs(got[0]) < 1e-9

    def test_mixture_value(self, two_leaf_sum):
        # 0.6 * 0.5 + 0.4 * 0.25 = 0.4; cross-checked against the linear path
        got = log_likelihood(two_leaf_sum, [0.0])[0]
        assert got == pytest.approx(math.log(0.4), abs=1e-12)
        lin = linear_forward(two_leaf_sum, [0.0])[two_leaf_sum.roots[0]]
        assert got == pytest.approx(math.log(lin), abs=1e-12)

    def test_evidence_length_mismatch(self, two_leaf_sum):
        with pytest.raises(ShapeError):
            log_likelihood(two_leaf_sum, [0.0, 1.0])

    def test_non_finite_leaf_parameter(self):
        c = Circuit([GaussianLeaf(0, math.nan, 0.0)], [0], 1, np.zeros(1))
        with pytest.raises(ParameterError):
            log_likelihood(c, [0.0])

    def test_batch_matches_scalar(self, three_var_tree):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(8, 3))
        X[2, 1] = np.nan
        batch = log_likelihood_batch(three_var_tree, X)
        for i in range(8):
            single = log_likelihood(three_var_tree, X[i])
            np.testing.assert_allclose(batch[i], single, rtol=1e-13)


class TestInvariantProperties:
    def test_normalization_on_generated_circuits(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            c = random_tree_circuit(rng, max_sum_edges=10)
            ll = log_likelihood(c, Evidence.marginal_all(c.num_variables))
            assert np.all(np.abs(ll) < 1e-9)
        for _ in range(10):
            c = random_dag_circuit(rng, max_sum_edges=10)
            ll = log_likelihood(c, Evidence.marginal_all(c.num_variables))
            assert np.all(np.abs(ll) < 1e-9)

    def test_log_linear_consistency(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            c = random_tree_circuit(rng, max_sum_edges=10)
            ev = random_evidence(rng, c)
            log_roots = log_likelihood(c, ev)
            lin_roots = linear_forward(c, ev)[c.roots]
            for lg, ln in zip(log_roots, lin_roots):
                assert rel_err(math.exp(lg), ln) < 1e-9

    def test_marginal_monotonicity_discrete(self):
        # marginalizing one more variable never lowers the probability
        spec = """
        a categorical 0 0.3 0.7
        b categorical 1 0.6 0.4
        c categorical 2 0.5 0.5
        d categorical 2 0.2 0.8
        s sum 0.5 c 0.5 d
        p product a b s
        root p
        """
        c = build_manual(spec)
        rng = np.random.default_rng(3)
        for _ in range(40):
            values = [float(rng.integers(2)) for _ in range(3)]
            full = log_likelihood(c, values)[0]
            for v in range(3):
                partial = list(values)
                partial[v] = None
                marg = log_likelihood(c, Evidence.of(partial))[0]
                assert marg >= full - 1e-12


class TestSerialization:
    def test_single_leaf_round_trip(self):
        c = Circuit([gaussian(0, 0.25, -0.5)], [0], 1, np.zeros(1))
        c2 = deserialize(serialize(c))
        assert len(c2.nodes) == 1
        assert c2.nodes[0].mean == 0.25 and c2.nodes[0].log_std == -0.5
        assert c2.roots == [0] and c2.num_variables == 1

    def test_unnormalized_weights_rejected_on_load(self):
        import json

        blob = serialize(build_manual("a gaussian 0 0 1\nb gaussian 0 1 1\ns sum 0.5 a 0.5 b\nroot s"))
        doc = json.loads(blob)
        doc["nodes"][2]["log_weights"] = [math.log(0.5), math.log(0.4)]
        with pytest.raises(SerializationError):
            deserialize(json.dumps(doc).encode())

    def test_unknown_version(self):
        blob = serialize(build_manual("a gaussian 0 0 1\nroot a"))
        import json
        doc = json.loads(blob)
        doc["version"] = 99
        with pytest.raises(SerializationError):
            deserialize(json.dumps(doc).encode())

    def test_malformed_bytes(self):
        with pytest.raises(SerializationError):
            deserialize(b"not json at all")

    def test_rat_round_trip_preserves_likelihood(self):
        c = build_rat(RatConfig(2, 2, 1, 1, 1, 2, rng_seed=9))
        c2 = deserialize(serialize(c))
        x = np.array([0.3, -0.7])
        assert log_likelihood(c, x)[0] == pytest.approx(log_likelihood(c2, x)[0], abs=0)
        assert c2.rat is not None
        assert c2.rat.product_partition == c.rat.product_partition

    def test_refuses_invalid_circuit(self):
        nodes = [gaussian(0), gaussian(0), SumNode([0, 1], np.log([0.5, 0.4]))]
        c = Circuit(nodes, [2], 1, np.zeros(1))
        with pytest.raises(SerializationError):
            serialize(c)


def test_is_tree_detects_sharing():
    shared = [gaussian(0), SumNode([0, 0], np.log([0.5, 0.5]))]
    c = Circuit(shared, [1], 1, np.zeros(1))
    assert not c.is_tree()
    chain = [gaussian(0), SumNode([0], np.zeros(1))]
    assert Circuit(chain, [1], 1, np.zeros(1)).is_tree()
