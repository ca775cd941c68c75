"""Closed-form dropout moments in a single bottom-up pass.

Dropping each sum-node edge independently with probability p turns every node
value into a random variable.  Expectations, variances, and sibling
covariances of those values propagate bottom-up through the circuit in closed
form, so the model uncertainty at the roots costs one traversal instead of
many stochastic forward passes.

All moments are kept in signed log space: expectations and variances of
nonnegative circuit values as log magnitudes, covariances as (sign, log|x|)
pairs, because deep circuits underflow linear doubles long before they get
interesting.

Covariance handling between siblings is pluggable:

* ``TREE_ZERO`` ignores sibling covariances.  Exact on tree circuits; on a
  DAG it is exactly the moments of the circuit with every shared child
  duplicated per parent path (each duplicate drawing fresh dropout masks).
* ``RAT_EXACT`` resolves covariances exactly on binary RAT region graphs,
  where a product's two children always come from independent partitions.
* ``CAUCHY_LOWER`` / ``CAUCHY_UPPER`` keep the point estimate at zero
  covariance and attach per-node variance intervals derived from the
  Cauchy-Schwarz bound |Cov[a,b]| <= sqrt(Var[a] Var[b]) to the frame
  metadata, for diagnostics.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .circuit import Circuit, as_evidence, leaf_log_value
from .errors import StructureError, UnderflowError
from .signedlog import SignedLog, log1mexp, sl_sum

_NEG_INF = float("-inf")

ENTROPY_CLAMP = 1e-12


class CovarianceStrategy(enum.Enum):
    TREE_ZERO = "tree_zero"
    RAT_EXACT = "rat_exact"
    CAUCHY_LOWER = "cauchy_lower"
    CAUCHY_UPPER = "cauchy_upper"


class TaylorMethod(enum.Enum):
    SIMPLE = "simple"
    EXTENDED = "extended"


@dataclass(frozen=True)
class DropoutConfig:
    """Dropout probability and sibling-covariance strategy.

    The keep probability q is the stored quantity and p is derived as 1 - q,
    so p + q == 1 holds exactly in floating point.  ``exclude_root_heads``
    evaluates root sum nodes without dropout on their outgoing edges.
    """

    q: float
    covariance_strategy: CovarianceStrategy = CovarianceStrategy.TREE_ZERO
    exclude_root_heads: bool = False

    @staticmethod
    def with_p(
        p: float,
        covariance_strategy: CovarianceStrategy = CovarianceStrategy.TREE_ZERO,
        exclude_root_heads: bool = False,
    ) -> "DropoutConfig":
        if not (0.0 <= p < 1.0):
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        return DropoutConfig(1.0 - p, covariance_strategy, exclude_root_heads)

    @property
    def p(self) -> float:
        return 1.0 - self.q


@dataclass
class MomentFrame:
    """Per-evaluation store of node moments in signed log space.

    ``log_expectation`` and ``log_variance`` are log magnitudes (the values
    themselves are nonnegative).  ``sibling_cov`` holds signed covariances for
    node pairs that were materialized during the pass: pairs sharing a parent,
    plus same-region pairs the exact RAT strategy resolves recursively.
    """

    circuit: Circuit
    config: DropoutConfig
    log_expectation: np.ndarray
    log_variance: np.ndarray
    sibling_cov: dict[tuple[int, int], SignedLog] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def expectation(self, node: int) -> SignedLog:
        return SignedLog.from_log(float(self.log_expectation[node]))

    def variance(self, node: int) -> SignedLog:
        return SignedLog.from_log(float(self.log_variance[node]))

    def cov(self, a: int, b: int) -> SignedLog:
        """Materialized covariance; the diagonal is the variance."""
        if a == b:
            return self.variance(a)
        key = (a, b) if a < b else (b, a)
        if key in self.sibling_cov:
            return self.sibling_cov[key]
        return SignedLog.zero()

    def pair_cov(self, a: int, b: int) -> SignedLog:
        """Covariance of two arbitrary nodes under this frame's strategy."""
        return _pair_cov(self, a, b)

    @staticmethod
    def from_linear(
        circuit: Circuit, expectation: np.ndarray, variance: np.ndarray
    ) -> "MomentFrame":
        """Wrap externally computed linear-space moments (e.g. enumerated ones)."""
        with np.errstate(divide="ignore"):
            log_e = np.log(np.asarray(expectation, dtype=np.float64))
            log_v = np.log(np.asarray(variance, dtype=np.float64))
        frame = MomentFrame(
            circuit=circuit,
            config=DropoutConfig.with_p(0.0),
            log_expectation=log_e,
            log_variance=log_v,
        )
        frame.metadata["source"] = "external"
        return frame


# ---------------------------------------------------------------------------
# The bottom-up pass


def tdi_pass(
    circuit: Circuit,
    evidence,
    config: DropoutConfig,
    leaf_log_variance: Optional[dict[int, float]] = None,
) -> MomentFrame:
    """One bottom-up traversal filling expectation, variance, and covariances.

    Sum node:      E = q sum_i w_i E[N_i]
                   Var = q sum_i w_i^2 (Var[N_i] + p E[N_i]^2)
                         + q^2 sum_{i != j} w_i w_j Cov[N_i, N_j]
    Product node:  E = prod_i E[N_i]
                   Var = prod_i (Var[N_i] + E[N_i]^2) - prod_i E[N_i]^2
    Leaf:          E = leaf value, Var = 0 (unless a prior leaf variance is
                   supplied through ``leaf_log_variance``).

    The covariance term follows the configured strategy.  Cost is linear in
    edges under TREE_ZERO and at most quadratic in local fan-in otherwise.
    """
    values = as_evidence(evidence, circuit.num_variables)
    strategy = config.covariance_strategy
    if strategy is CovarianceStrategy.RAT_EXACT and circuit.rat is None:
        raise StructureError("RAT_EXACT requires a circuit tagged with RAT structure")

    n = len(circuit.nodes)
    log_e = np.full(n, _NEG_INF)
    log_v = np.full(n, _NEG_INF)
    frame = MomentFrame(circuit, config, log_e, log_v)
    frame.metadata["p"] = config.p
    frame.metadata["strategy"] = strategy.value
    if strategy is CovarianceStrategy.TREE_ZERO and not circuit.is_tree():
        frame.metadata["treezero_on_dag"] = True
    cauchy = strategy in (CovarianceStrategy.CAUCHY_LOWER, CovarianceStrategy.CAUCHY_UPPER)
    if cauchy:
        frame.metadata["cauchy_var_bounds"] = {}

    roots = set(circuit.roots)
    log_q = math.log(config.q) if config.q > 0.0 else _NEG_INF
    log_p = math.log(config.p) if config.p > 0.0 else _NEG_INF

    for i, node in enumerate(circuit.nodes):
        if node.kind in ("gaussian", "categorical"):
            log_e[i] = leaf_log_value(node, float(values[node.variable]))
            if leaf_log_variance and i in leaf_log_variance:
                log_v[i] = leaf_log_variance[i]
            continue

        if node.kind == "product":
            ce = log_e[node.children]
            cv = log_v[node.children]
            log_e[i] = float(ce.sum())
            log_v[i] = _product_log_variance(ce, cv)
            continue

        # sum node
        lq, lp = (0.0, _NEG_INF) if (config.exclude_root_heads and i in roots) else (log_q, log_p)
        lw = node.log_weights
        ce = log_e[node.children]
        cv = log_v[node.children]
        log_e[i] = lq + _lse(lw + ce)
        t1 = lq + _lse(2.0 * lw + np.logaddexp(cv, lp + 2.0 * ce))

        if strategy is CovarianceStrategy.TREE_ZERO:
            log_v[i] = t1
        elif cauchy:
            log_v[i] = t1
            spread = _cauchy_pair_spread(lw, cv)
            lo = math.exp(t1) - math.exp(2.0 * lq + spread) if spread > _NEG_INF else math.exp(t1)
            hi = math.exp(t1) + math.exp(2.0 * lq + spread) if spread > _NEG_INF else math.exp(t1)
            frame.metadata["cauchy_var_bounds"][i] = (max(lo, 0.0), hi)
        else:  # RAT_EXACT
            cov_term = SignedLog.zero()
            kids = node.children
            for a in range(len(kids)):
                for b in range(a + 1, len(kids)):
                    c = _pair_cov(frame, kids[a], kids[b])
                    if not c.is_zero:
                        cov_term = cov_term + c.scale_log(float(lw[a] + lw[b]))
            var = SignedLog.from_log(t1) + cov_term.scale_log(2.0 * lq + math.log(2.0))
            log_v[i] = _nonnegative_log(var, context=f"variance of sum node {i}")
    return frame


def _product_log_variance(child_log_e: np.ndarray, child_log_v: np.ndarray) -> float:
    """log of prod(V_i + E_i^2) - prod(E_i^2), computed without cancellation."""
    if np.any(np.isneginf(child_log_e) & np.isneginf(child_log_v)):
        return _NEG_INF  # a child is identically zero, so the product is too
    if np.all(np.isneginf(child_log_v)):
        return _NEG_INF
    log_e2 = 2.0 * child_log_e
    if np.any(np.isneginf(log_e2)):
        # Some child has zero mean but positive variance: fall back to the
        # direct two-product form, where the subtrahend vanishes.
        return float(np.logaddexp(child_log_v, log_e2).sum())
    # prod(E^2) * expm1(sum log1p(V/E^2))
    ratio = np.log1p(np.exp(child_log_v - log_e2)).sum()
    return float(log_e2.sum()) + math.log(math.expm1(ratio))


def _cauchy_pair_spread(lw: np.ndarray, child_log_v: np.ndarray) -> float:
    """log of sum_{i != j} w_i w_j sqrt(Var_i Var_j), the half-width of the
    covariance contribution interval at a sum node."""
    terms = lw + 0.5 * child_log_v
    total = _lse(terms)
    if total == _NEG_INF:
        return _NEG_INF
    # (sum_i t_i)^2 - sum_i t_i^2, all terms nonnegative
    sq = _lse(2.0 * terms)
    if 2.0 * total <= sq:
        return _NEG_INF
    return 2.0 * total + log1mexp(sq - 2.0 * total)


def _lse(terms: np.ndarray) -> float:
    m = float(np.max(terms)) if terms.size else _NEG_INF
    if m == _NEG_INF:
        return _NEG_INF
    return m + math.log(float(np.exp(terms - m).sum()))


def _nonnegative_log(value: SignedLog, context: str) -> float:
    if value.sign >= 0:
        return value.log_mag if value.sign > 0 else _NEG_INF
    # Exact math guarantees nonnegativity; tolerate rounding dust only.
    return _NEG_INF


# ---------------------------------------------------------------------------
# Pairwise covariances


def _pair_cov(frame: MomentFrame, a: int, b: int) -> SignedLog:
    if a == b:
        return frame.variance(a)
    key = (a, b) if a < b else (b, a)
    cached = frame.sibling_cov.get(key)
    if cached is not None:
        return cached
    result = _pair_cov_uncached(frame, a, b)
    frame.sibling_cov[key] = result
    return result


def _pair_cov_uncached(frame: MomentFrame, a: int, b: int) -> SignedLog:
    strategy = frame.config.covariance_strategy
    if np.isneginf(frame.log_variance[a]) or np.isneginf(frame.log_variance[b]):
        return SignedLog.zero()  # Cauchy-Schwarz: zero variance forces zero covariance
    scopes = frame.circuit.scopes()
    if scopes[a] & scopes[b] == 0:
        return SignedLog.zero()  # disjoint scopes share no descendants
    if strategy is CovarianceStrategy.TREE_ZERO:
        return SignedLog.zero()
    if strategy in (CovarianceStrategy.CAUCHY_LOWER, CovarianceStrategy.CAUCHY_UPPER):
        return SignedLog.zero()  # point estimate; bounds live in the metadata
    return _rat_pair_cov(frame, a, b)


def _rat_pair_cov(frame: MomentFrame, a: int, b: int) -> SignedLog:
    circuit = frame.circuit
    rat = circuit.rat
    na, nb = circuit.nodes[a], circuit.nodes[b]
    if na.kind == "sum" and nb.kind == "sum":
        ra = rat.sum_region.get(a)
        rb = rat.sum_region.get(b)
        if ra is not None and rb is not None:
            if ra[0] != rb[0]:
                return SignedLog.zero()  # different repetitions share nothing
            if ra != rb:
                raise StructureError(
                    f"covariance between sums {a} and {b} of different regions is not "
                    "resolvable on a RAT structure"
                )
            return _sum_sum_cov(frame, a, b)
        if ra is None and rb is None:
            return _sum_sum_cov(frame, a, b)  # class heads over tagged products
        raise StructureError(f"sums {a} and {b} are inconsistently tagged")
    if na.kind == "product" and nb.kind == "product":
        pa = rat.product_partition.get(a)
        pb = rat.product_partition.get(b)
        if pa is None or pb is None:
            raise StructureError(f"products {a} and {b} lack partition tags")
        if pa[0] != pb[0]:
            return SignedLog.zero()  # different repetitions share nothing
        if pa != pb:
            raise StructureError(
                f"covariance between products {a} and {b} of different partitions is "
                "not resolvable on a RAT structure"
            )
        return rat_product_covariance(frame, a, b)
    raise StructureError(
        f"covariance between nodes {a} ({na.kind}) and {b} ({nb.kind}) is not "
        "resolvable on a RAT structure"
    )


def _sum_sum_cov(frame: MomentFrame, a: int, b: int) -> SignedLog:
    """Cov of two sum nodes: q^2 sum_i sum_j w_i^A w_j^B Cov[N_i^A, N_j^B]."""
    circuit = frame.circuit
    na, nb = circuit.nodes[a], circuit.nodes[b]
    q = frame.config.q
    if frame.config.exclude_root_heads and (a in circuit.roots or b in circuit.roots):
        qa = 1.0 if a in circuit.roots else q
        qb = 1.0 if b in circuit.roots else q
        log_qq = math.log(qa) + math.log(qb) if qa * qb > 0 else _NEG_INF
    else:
        log_qq = 2.0 * math.log(q) if q > 0 else _NEG_INF
    terms = []
    for wi, ci in zip(na.log_weights, na.children):
        for wj, cj in zip(nb.log_weights, nb.children):
            c = _pair_cov(frame, ci, cj)
            if not c.is_zero:
                terms.append(c.scale_log(float(wi + wj)))
    return sl_sum(terms).scale_log(log_qq)


def sum_covariance(frame: MomentFrame, sum_a: int, sum_b: int, config=None) -> SignedLog:
    """Covariance of two sum nodes with child covariances per the strategy."""
    circuit = frame.circuit
    for s in (sum_a, sum_b):
        if circuit.nodes[s].kind != "sum":
            raise StructureError(f"node {s} is not a sum node")
    if config is not None and config.covariance_strategy != frame.config.covariance_strategy:
        raise StructureError("config strategy differs from the frame's strategy")
    return _sum_sum_cov(frame, sum_a, sum_b)


def rat_product_covariance(frame: MomentFrame, prod_a: int, prod_b: int) -> SignedLog:
    """Covariance of two binary RAT products via their partition factors:

    Cov[P_lr, P_l'r'] = Cov[L_l, L_l'] E[R_r] E[R_r']
                        + Cov[R_r, R_r'] E[L_l] E[L_l']
                        + Cov[L_l, L_l'] Cov[R_r, R_r']
    """
    circuit = frame.circuit
    na, nb = circuit.nodes[prod_a], circuit.nodes[prod_b]
    for node_id, node in ((prod_a, na), (prod_b, nb)):
        if node.kind != "product" or len(node.children) != 2:
            raise StructureError(f"node {node_id} is not a binary product")
    la, ra = na.children
    lb, rb = nb.children
    scopes = circuit.scopes()
    if scopes[la] != scopes[lb] or scopes[ra] != scopes[rb]:
        raise StructureError(f"products {prod_a} and {prod_b} are not partition-aligned")
    cov_l = _pair_cov(frame, la, lb)
    cov_r = _pair_cov(frame, ra, rb)
    le = frame.log_expectation
    term1 = cov_l.scale_log(float(le[ra] + le[rb]))
    term2 = cov_r.scale_log(float(le[la] + le[lb]))
    term3 = cov_l * cov_r
    return term1 + term2 + term3


def cauchy_bounds(frame: MomentFrame, a: int, b: int) -> tuple[SignedLog, SignedLog]:
    """Cauchy-Schwarz covariance interval +-sqrt(Var[a] Var[b])."""
    half = 0.5 * (float(frame.log_variance[a]) + float(frame.log_variance[b]))
    if half == _NEG_INF or math.isnan(half):
        return SignedLog.zero(), SignedLog.zero()
    return SignedLog(-1, half), SignedLog(1, half)


# ---------------------------------------------------------------------------
# Posterior classification moments


@dataclass
class PosteriorMoments:
    """Approximate moments of the class posterior under dropout."""

    mean: np.ndarray
    variance: np.ndarray
    std: np.ndarray
    entropy: float
    normalized_entropy: float
    metadata: dict = field(default_factory=dict)


def posterior_moments(
    circuit: Circuit,
    evidence,
    config: DropoutConfig,
    method: TaylorMethod = TaylorMethod.SIMPLE,
) -> PosteriorMoments:
    """Taylor-approximated mean and variance of each class posterior.

    With A = S_i c_i for class i and B = sum_j S_j c_j, the ratio moments are

        E[A/B]   ~= E[A]/E[B] - Cov[A,B]/E[B]^2 + Var[B] E[A]/E[B]^3
        Var[A/B] ~= (E[A]/E[B])^2 (Var[A]/E[A]^2 - 2 Cov[A,B]/(E[A]E[B])
                                   + Var[B]/E[B]^2)

    for the SIMPLE method.  EXTENDED additionally carries the second-order
    cross terms that account for the dependence between a root and the sum of
    all roots; its product-variance term uses the crude local-independence
    shortcut Var[XY] = Var[X] Var[Y].
    """
    if circuit.num_classes < 2:
        raise StructureError("posterior moments need at least two class roots")
    frame = tdi_pass(circuit, evidence, config)
    mean, var, meta = _posterior_from_frame(frame, method)
    mean_clamped = np.clip(mean, 0.0, 1.0)
    var = np.maximum(var, 0.0)
    entropy = predictive_entropy(mean_clamped)
    out = PosteriorMoments(
        mean=mean_clamped,
        variance=var,
        std=np.sqrt(var),
        entropy=entropy,
        normalized_entropy=entropy / math.log(circuit.num_classes),
        metadata=dict(frame.metadata),
    )
    out.metadata.update(meta)
    out.metadata["method"] = method.value
    out.metadata["raw_mean"] = mean
    return out


def _posterior_from_frame(frame: MomentFrame, method: TaylorMethod):
    circuit = frame.circuit
    roots = circuit.roots
    C = len(roots)
    log_c = np.asarray(circuit.log_class_priors, dtype=np.float64)
    log_es = frame.log_expectation[roots]  # E[S_i]
    log_vs = frame.log_variance[roots]  # Var[S_i]
    log_ea = log_es + log_c  # E[A_i]

    shift = float(np.max(log_ea))
    if shift == _NEG_INF:
        raise UnderflowError(
            "all class likelihoods vanished; the posterior denominator is zero"
        )
    # Every Taylor term is a degree-zero ratio of moments, so shifting each
    # moment by its degree in the root scale keeps everything in float range.
    lea = log_ea - shift
    lvs = log_vs - 2.0 * shift
    les = log_es - shift
    lva = lvs + 2.0 * log_c  # Var[A_i] = Var[S_i] c_i^2, shifted
    eb = float(np.exp(lea).sum())
    leb = math.log(eb)

    # Root covariances c_i c_j Cov[S_i, S_j] for i != j, per strategy (shifted).
    cov_roots = {}
    for i in range(C):
        for j in range(i + 1, C):
            c = _pair_cov(frame, roots[i], roots[j])
            if not c.is_zero:
                cov_roots[(i, j)] = SignedLog(c.sign, c.log_mag - 2.0 * shift)

    def root_cov(i, j):
        if i == j:
            return SignedLog.from_log(float(lvs[i]))
        key = (i, j) if i < j else (j, i)
        return cov_roots.get(key, SignedLog.zero())

    # Var[B] = sum_j Var[A_j] + sum_{j1 != j2} c_j1 c_j2 Cov[S_j1, S_j2]
    var_b_terms = [SignedLog.from_log(float(v)) for v in lva]
    for (i, j), c in cov_roots.items():
        var_b_terms.append(c.scale_log(float(log_c[i] + log_c[j]) + math.log(2.0)))
    var_b = sl_sum(var_b_terms)
    if var_b.sign < 0:
        var_b = SignedLog.zero()

    # Cov[A_i, B] = c_i sum_j c_j Cov[S_i, S_j]
    cov_ab = []
    for i in range(C):
        terms = [SignedLog.from_log(float(lva[i]))]
        for j in range(C):
            if j != i:
                c = root_cov(i, j)
                if not c.is_zero:
                    terms.append(c.scale_log(float(log_c[i] + log_c[j])))
        cov_ab.append(sl_sum(terms))

    mean = np.empty(C)
    var = np.empty(C)
    meta = {}
    if method is TaylorMethod.SIMPLE:
        for i in range(C):
            if lea[i] == _NEG_INF:
                mean[i] = 0.0
                var[i] = 0.0
                continue
            t1 = math.exp(lea[i] - leb)
            t2 = cov_ab[i].scale_log(-2.0 * leb).to_float()
            t3 = var_b.scale_log(float(lea[i]) - 3.0 * leb).to_float()
            mean[i] = t1 - t2 + t3
            rel_a = math.exp(lva[i] - 2.0 * lea[i])
            rel_ab = cov_ab[i].scale_log(-(float(lea[i]) + leb)).to_float()
            rel_b = var_b.scale_log(-2.0 * leb).to_float()
            var[i] = (t1 * t1) * (rel_a - 2.0 * rel_ab + rel_b)
    else:
        mean, var, meta = _extended_taylor(frame, lea, les, lvs, log_c, leb, root_cov)
    return mean, var, meta


def _extended_taylor(frame, lea, les, lvs, log_c, leb, root_cov):
    """Second-order expansion that keeps root/denominator dependence.

    Var[S_i S_j] is expanded over the root sum nodes' children as
    sum_{k,l} (w_k w_l)^2 Var[N_k] Var[N_l], which factors into T_i T_j with
    T_i = sum_k w_k^2 Var[N_k]; non-sum roots fall back to T_i = Var[S_i].
    """
    circuit = frame.circuit
    roots = circuit.roots
    C = len(roots)
    shift2 = 2.0 * (float(np.max(frame.log_expectation[roots] + log_c)))
    log_t = np.empty(C)
    for i, r in enumerate(roots):
        node = circuit.nodes[r]
        if node.kind == "sum":
            lw = node.log_weights
            cv = frame.log_variance[node.children]
            log_t[i] = _lse(2.0 * lw + cv) - shift2
        else:
            log_t[i] = float(frame.log_variance[r]) - shift2

    mean = np.empty(C)
    var = np.empty(C)
    eb = math.exp(leb)
    for i in range(C):
        if lea[i] == _NEG_INF:
            mean[i] = 0.0
            var[i] = 0.0
            continue
        zni = eb - math.exp(lea[i])  # E[Z \ i], shifted scale
        f0 = math.exp(lea[i] - leb)
        ci = math.exp(float(log_c[i]))
        # Mean correction terms.
        corr = -2.0 * ci * zni / eb**3 * math.exp(lvs[i])
        for j in range(C):
            if j == i:
                continue
            cov_ij = root_cov(i, j).to_float()
            if cov_ij == 0.0:
                continue
            coeff_j = math.exp(float(log_c[j])) * (eb + 2.0 * math.exp(lea[i])) / eb**3
            corr -= coeff_j * cov_ij
        mean[i] = f0 + corr

        # Variance terms.  Each expansion term contributes its squared
        # coefficient times the variance of its moment combination.
        v = (ci * zni / eb**2) ** 2 * math.exp(lvs[i])
        for j in range(C):
            if j == i:
                continue
            coeff = (math.exp(float(log_c[j])) * (2.0 * math.exp(lea[i]) + eb) / eb**3) ** 2
            var_ss = math.exp(log_t[i] + log_t[j])
            combo = (
                var_ss
                - math.exp(2.0 * les[j] + lvs[i])
                - math.exp(2.0 * les[i] + lvs[j])
            )
            v += coeff * combo
        v += (2.0 * ci * zni / eb**3) ** 2 * (
            math.exp(2.0 * log_t[i]) - 4.0 * math.exp(2.0 * les[i] + lvs[i])
        )
        var[i] = v
    return mean, var, {"taylor_t": log_t}


def predictive_entropy(means) -> float:
    """Entropy of the class posterior after clamping and renormalization."""
    m = np.asarray(means, dtype=np.float64)
    if np.any(m < 0.0):
        raise ValueError("posterior means must be nonnegative")
    total = float(m.sum())
    if total <= 0.0:
        raise ValueError("all posterior means are zero")
    m = np.clip(m, ENTROPY_CLAMP, 1.0)
    m = m / m.sum()
    return float(-(m * np.log(m)).sum())


# ---------------------------------------------------------------------------
# Vectorized batch path (zero-covariance strategies only)


def tdi_pass_batch(circuit: Circuit, X: np.ndarray, config: DropoutConfig):
    """Per-node log expectation and log variance for a batch of rows.

    Vectorized over rows; covers the strategies whose point estimates drop
    sibling covariances (TREE_ZERO and the Cauchy diagnostics).  Returns two
    (nodes, rows) arrays.
    """
    if config.covariance_strategy is CovarianceStrategy.RAT_EXACT:
        raise StructureError("the batch pass supports zero-covariance strategies only")
    X = np.asarray(X, dtype=np.float64)
    rows = X.shape[0]
    n = len(circuit.nodes)
    log_e = np.full((n, rows), _NEG_INF)
    log_v = np.full((n, rows), _NEG_INF)
    roots = set(circuit.roots)
    log_q = math.log(config.q) if config.q > 0.0 else _NEG_INF
    log_p = math.log(config.p) if config.p > 0.0 else _NEG_INF

    with np.errstate(divide="ignore", invalid="ignore"):
        for i, node in enumerate(circuit.nodes):
            if node.kind in ("gaussian", "categorical"):
                log_e[i] = _leaf_batch(node, X)
                continue
            if node.kind == "product":
                ce = log_e[node.children]
                cv = log_v[node.children]
                log_e[i] = ce.sum(axis=0)
                log_v[i] = _product_log_variance_batch(ce, cv)
                continue
            lq, lp = (
                (0.0, _NEG_INF)
                if (config.exclude_root_heads and i in roots)
                else (log_q, log_p)
            )
            lw = node.log_weights[:, None]
            ce = log_e[node.children]
            cv = log_v[node.children]
            log_e[i] = lq + _lse_axis0(lw + ce)
            log_v[i] = lq + _lse_axis0(2.0 * lw + np.logaddexp(cv, lp + 2.0 * ce))
    return log_e, log_v


def _leaf_batch(node, X):
    from .circuit import _leaf_log_values_batch

    return _leaf_log_values_batch(node, X[:, node.variable])


def _product_log_variance_batch(ce: np.ndarray, cv: np.ndarray) -> np.ndarray:
    rows = ce.shape[1]
    out = np.full(rows, _NEG_INF)
    zero_e = np.isneginf(ce).any(axis=0)
    all_zero_v = np.isneginf(cv).all(axis=0)
    ok = ~(zero_e | all_zero_v)
    if np.any(ok):
        log_e2 = 2.0 * ce[:, ok]
        ratio = np.log1p(np.exp(cv[:, ok] - log_e2)).sum(axis=0)
        out[ok] = log_e2.sum(axis=0) + np.log(np.expm1(ratio))
    special = zero_e & ~all_zero_v
    if np.any(special):
        out[special] = np.logaddexp(cv[:, special], 2.0 * ce[:, special]).sum(axis=0)
    return out


def _lse_axis0(terms: np.ndarray) -> np.ndarray:
    m = np.max(terms, axis=0)
    safe = np.where(np.isneginf(m), 0.0, m)
    out = safe + np.log(np.exp(terms - safe[None, :]).sum(axis=0))
    return np.where(np.isneginf(m), _NEG_INF, out)


def posterior_moments_batch(
    circuit: Circuit,
    X: np.ndarray,
    config: DropoutConfig,
    method: TaylorMethod = TaylorMethod.SIMPLE,
):
    """Posterior means and variances for a batch, shape (rows, classes) each.

    Uses the vectorized pass for zero-covariance strategies and falls back to
    the per-row engine when exact RAT covariances are requested.
    """
    if circuit.num_classes < 2:
        raise StructureError("posterior moments need at least two class roots")
    X = np.asarray(X, dtype=np.float64)
    if config.covariance_strategy is CovarianceStrategy.RAT_EXACT:
        means = np.empty((X.shape[0], circuit.num_classes))
        variances = np.empty_like(means)
        for r in range(X.shape[0]):
            pm = posterior_moments(circuit, X[r], config, method)
            means[r] = pm.mean
            variances[r] = pm.variance
        return means, variances

    log_e, log_v = tdi_pass_batch(circuit, X, config)
    roots = circuit.roots
    log_c = np.asarray(circuit.log_class_priors)[:, None]
    lse_roots = log_e[roots]  # (C, rows)
    lvs = log_v[roots]
    log_ea = lse_roots + log_c
    shift = np.max(log_ea, axis=0)
    dead = np.isneginf(shift)
    if np.any(dead):
        idx = int(np.flatnonzero(dead)[0])
        raise UnderflowError(
            f"all class likelihoods vanished for row {idx}; the posterior "
            "denominator is zero"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        lea = log_ea - shift[None, :]
        lvs_s = lvs - 2.0 * shift[None, :]
        lva = lvs_s + 2.0 * log_c
        eb = np.exp(lea).sum(axis=0)
        leb = np.log(eb)
        # Zero sibling covariance between roots: Cov[A_i, B] = Var[A_i].
        var_b = np.exp(lva).sum(axis=0)
        ea = np.exp(lea)
        t1 = ea / eb[None, :]
        if method is TaylorMethod.SIMPLE:
            t2 = np.exp(lva - 2.0 * leb[None, :])
            t3 = t1 * var_b[None, :] / eb[None, :] ** 2
            mean = t1 - t2 + t3
            rel_a = np.where(ea > 0.0, np.exp(lva) / np.maximum(ea, 1e-300) ** 2, 0.0)
            rel_ab = np.where(
                ea > 0.0, np.exp(lva) / (np.maximum(ea, 1e-300) * eb[None, :]), 0.0
            )
            rel_b = var_b[None, :] / eb[None, :] ** 2
            var = t1**2 * (rel_a - 2.0 * rel_ab + rel_b)
            var = np.where(ea > 0.0, var, 0.0)
            mean = np.where(ea > 0.0, mean, 0.0)
        else:
            mean, var = _extended_taylor_batch(circuit, log_e, log_v, lea, lvs_s, log_c, eb, shift)
    return mean.T, np.maximum(var.T, 0.0)


def _extended_taylor_batch(circuit, log_e, log_v, lea, lvs, log_c, eb, shift):
    roots = circuit.roots
    C = len(roots)
    rows = lea.shape[1]
    log_t = np.empty((C, rows))
    with np.errstate(divide="ignore"):
        for i, r in enumerate(roots):
            node = circuit.nodes[r]
            if node.kind == "sum":
                lw = node.log_weights[:, None]
                log_t[i] = _lse_axis0(2.0 * lw + log_v[node.children]) - 2.0 * shift
            else:
                log_t[i] = log_v[r] - 2.0 * shift
    ea = np.exp(lea)
    les = lea - log_c  # shifted log E[S_i]
    mean = np.empty((C, rows))
    var = np.empty((C, rows))
    c_lin = np.exp(log_c)[:, 0]
    t_lin = np.exp(log_t)
    vs_lin = np.exp(lvs)
    es_lin = np.exp(les)
    for i in range(C):
        zni = eb - ea[i]
        f0 = ea[i] / eb
        corr = -2.0 * c_lin[i] * zni / eb**3 * vs_lin[i]
        mean[i] = f0 + corr
        v = (c_lin[i] * zni / eb**2) ** 2 * vs_lin[i]
        for j in range(C):
            if j == i:
                continue
            coeff = (c_lin[j] * (2.0 * ea[i] + eb) / eb**3) ** 2
            combo = t_lin[i] * t_lin[j] - es_lin[j] ** 2 * vs_lin[i] - es_lin[i] ** 2 * vs_lin[j]
            v += coeff * combo
        v += (2.0 * c_lin[i] * zni / eb**3) ** 2 * (
            t_lin[i] ** 2 - 4.0 * es_lin[i] ** 2 * vs_lin[i]
        )
        var[i] = v
    dead = ea <= 0.0
    mean[dead] = 0.0
    var[dead] = 0.0
    return mean, var


def predictive_entropy_batch(means: np.ndarray) -> np.ndarray:
    """Row-wise predictive entropy for an array of posterior means."""
    m = np.asarray(means, dtype=np.float64)
    m = np.clip(m, ENTROPY_CLAMP, 1.0)
    m = m / m.sum(axis=1, keepdims=True)
    return -(m * np.log(m)).sum(axis=1)


# ---------------------------------------------------------------------------
# Moment dumps (debug/test interchange format)


def write_moment_csv(frame: MomentFrame, nodes_path, cov_path) -> None:
    """Write node moments and materialized covariances as two CSV files."""
    circuit = frame.circuit
    with open(nodes_path, "w") as fh:
        fh.write("node_id,kind,expectation,variance\n")
        for i, node in enumerate(circuit.nodes):
            e = math.exp(frame.log_expectation[i]) if frame.log_expectation[i] > _NEG_INF else 0.0
            v = math.exp(frame.log_variance[i]) if frame.log_variance[i] > _NEG_INF else 0.0
            fh.write(f"{i},{node.kind},{e:.17g},{v:.17g}\n")
    with open(cov_path, "w") as fh:
        fh.write("node_a,node_b,cov\n")
        for (a, b), c in sorted(frame.sibling_cov.items()):
            fh.write(f"{a},{b},{c.to_float():.17g}\n")
