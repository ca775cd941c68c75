"""Circuit data model, structural validation, and log-space likelihood inference.

A circuit is a dense arena of nodes in topological order (children strictly
before parents).  Sum nodes mix same-scope children with normalized weights,
product nodes factorize disjoint-scope children, and leaves are univariate
distributions.  Everything downstream (dropout moments, training, evaluation)
shares this one representation.

Circuits are treated as immutable after construction: evaluation never writes
to the node arena, so a circuit can be shared freely across threads.
Validation is a separate pass rather than a constructor check, which keeps it
possible to build deliberately broken circuits for negative tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ParameterError, SerializationError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)

NORMALIZATION_TOL = 1e-9

CIRCUIT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Node types


@dataclass
class SumNode:
    children: list[int]
    log_weights: np.ndarray  # natural log of the mixture weights

    kind = "sum"


@dataclass
class ProductNode:
    children: list[int]

    kind = "product"


@dataclass
class GaussianLeaf:
    variable: int
    mean: float
    log_std: float  # log sigma, so sigma > 0 is unconstrained during training

    kind = "gaussian"
    children: tuple[int, ...] = ()


@dataclass
class CategoricalLeaf:
    variable: int
    log_probs: np.ndarray

    kind = "categorical"
    children: tuple[int, ...] = ()


Node = Union[SumNode, ProductNode, GaussianLeaf, CategoricalLeaf]


@dataclass
class RatAnnotation:
    """Structural tags attached to circuits built as binary RAT region graphs.

    ``sum_region`` maps a sum node to its (repetition, region) pair and
    ``product_partition`` maps a product node to its (repetition, partition)
    pair.  Class heads carry the reserved repetition index -1.  The exact
    covariance strategy needs these tags to know which node pairs live in the
    same partition.
    """

    sum_region: dict[int, tuple[int, int]] = field(default_factory=dict)
    product_partition: dict[int, tuple[int, int]] = field(default_factory=dict)


@dataclass
class Circuit:
    """Arena of nodes in topological order plus one root per class."""

    nodes: list[Node]
    roots: list[int]
    num_variables: int
    log_class_priors: np.ndarray
    rat: Optional[RatAnnotation] = None

    _scopes: Optional[list[int]] = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.roots)

    def scopes(self) -> list[int]:
        """Per-node variable scope as a bitmask over variable indices."""
        if self._scopes is None:
            scopes: list[int] = []
            for node in self.nodes:
                if node.kind in ("gaussian", "categorical"):
                    scopes.append(1 << node.variable)
                else:
                    s = 0
                    for c in node.children:
                        s |= scopes[c]
                    scopes.append(s)
            self._scopes = scopes
        return self._scopes

    def sum_edges(self) -> list[tuple[int, int]]:
        """All (sum node id, child position) pairs, in node order."""
        edges = []
        for i, node in enumerate(self.nodes):
            if node.kind == "sum":
                edges.extend((i, j) for j in range(len(node.children)))
        return edges

    def parent_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.nodes), dtype=np.int64)
        for node in self.nodes:
            for c in node.children:
                counts[c] += 1
        return counts

    def is_tree(self) -> bool:
        """True when no node is shared between parents (roots included)."""
        counts = self.parent_counts()
        for r in self.roots:
            counts[r] += 1
        return bool(np.all(counts <= 1))

    def edge_count(self) -> int:
        return sum(len(n.children) for n in self.nodes)

    def parameter_count(self) -> tuple[int, int]:
        """(total learnable parameters, Gaussian leaf parameters)."""
        total = 0
        gauss = 0
        for node in self.nodes:
            if node.kind == "sum":
                total += len(node.children)
            elif node.kind == "gaussian":
                total += 2
                gauss += 2
        return total, gauss


# ---------------------------------------------------------------------------
# Evidence


@dataclass
class Evidence:
    """Observed values per variable; NaN marks a marginalized variable."""

    values: np.ndarray

    @staticmethod
    def of(values: Sequence[Optional[float]]) -> "Evidence":
        arr = np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)
        return Evidence(arr)

    @staticmethod
    def marginal_all(num_variables: int) -> "Evidence":
        return Evidence(np.full(num_variables, np.nan))


def as_evidence(evidence, num_variables: int) -> np.ndarray:
    if isinstance(evidence, Evidence):
        values = evidence.values
    else:
        values = np.asarray(evidence, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != num_variables:
        raise ShapeError(
            f"evidence has shape {values.shape}, expected ({num_variables},)"
        )
    return values


# ---------------------------------------------------------------------------
# Validation


@dataclass
class Violation:
    node: Optional[int]
    constraint: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"[{v.constraint}] node={v.node}: {v.message}" for v in self.violations)


def validate(circuit: Circuit) -> ValidationReport:
    """Check every structural invariant; violations are data, not exceptions."""
    out: list[Violation] = []
    n = len(circuit.nodes)

    def bad(node, constraint, message):
        out.append(Violation(node, constraint, message))

    # Topological order and index density first: scope computation needs them.
    order_ok = True
    for i, node in enumerate(circuit.nodes):
        for c in node.children:
            if not (0 <= c < n):
                bad(i, "index", f"child {c} out of range 0..{n - 1}")
                order_ok = False
            elif c >= i:
                bad(i, "topological-order", f"child {c} does not precede parent {i}")
                order_ok = False
    for r in circuit.roots:
        if not (0 <= r < n):
            bad(None, "index", f"root {r} out of range 0..{n - 1}")
            order_ok = False
    if not order_ok:
        return ValidationReport(out)

    scopes = circuit.scopes()
    full_scope = (1 << circuit.num_variables) - 1

    for i, node in enumerate(circuit.nodes):
        if node.kind == "sum":
            if not node.children:
                bad(i, "empty-children", "sum node has no children")
                continue
            if len(node.log_weights) != len(node.children):
                bad(i, "weight-arity", "weight count differs from child count")
                continue
            total = float(np.exp(np.asarray(node.log_weights, dtype=np.float64)).sum())
            if not math.isfinite(total) or abs(total - 1.0) > NORMALIZATION_TOL:
                bad(i, "weight-normalization", f"weights sum to {total!r}, expected 1")
            first = scopes[node.children[0]]
            for c in node.children[1:]:
                if scopes[c] != first:
                    bad(i, "smoothness", f"children scopes differ (child {c})")
                    break
        elif node.kind == "product":
            if not node.children:
                bad(i, "empty-children", "product node has no children")
                continue
            seen = 0
            for c in node.children:
                if seen & scopes[c]:
                    bad(i, "decomposability", f"child {c} overlaps earlier siblings' scope")
                    break
                seen |= scopes[c]
        elif node.kind == "gaussian":
            if not (0 <= node.variable < circuit.num_variables):
                bad(i, "variable-range", f"variable {node.variable} out of range")
            if not (math.isfinite(node.mean) and math.isfinite(node.log_std)):
                bad(i, "leaf-parameter", "non-finite Gaussian parameter")
        elif node.kind == "categorical":
            if not (0 <= node.variable < circuit.num_variables):
                bad(i, "variable-range", f"variable {node.variable} out of range")
            probs = np.exp(np.asarray(node.log_probs, dtype=np.float64))
            total = float(probs.sum())
            if not math.isfinite(total) or abs(total - 1.0) > NORMALIZATION_TOL:
                bad(i, "leaf-normalization", f"probabilities sum to {total!r}, expected 1")
        else:  # pragma: no cover - unreachable with the declared node types
            bad(i, "unknown-kind", f"unknown node kind {node.kind!r}")

    if len(circuit.roots) < 1:
        bad(None, "roots", "circuit declares no roots")
    for r in circuit.roots:
        if scopes[r] != full_scope:
            bad(r, "root-scope", "root scope does not cover all variables")

    priors = np.asarray(circuit.log_class_priors, dtype=np.float64)
    if priors.shape != (len(circuit.roots),):
        bad(None, "prior-arity", f"{priors.shape[0]} priors for {len(circuit.roots)} roots")
    else:
        total = float(np.exp(priors).sum())
        if not math.isfinite(total) or abs(total - 1.0) > NORMALIZATION_TOL:
            bad(None, "prior-normalization", f"class priors sum to {total!r}, expected 1")

    return ValidationReport(out)


# ---------------------------------------------------------------------------
# Log-space likelihood inference


def leaf_log_value(node: Node, x: float) -> float:
    """Log density/mass of a leaf at x; NaN (marginalized) contributes log 1 = 0."""
    if math.isnan(x):
        return 0.0
    if node.kind == "gaussian":
        z = (x - node.mean) * math.exp(-node.log_std)
        return -0.5 * z * z - node.log_std - 0.5 * LOG_2PI
    # categorical
    k = int(x)
    if k != x or not (0 <= k < len(node.log_probs)):
        raise ShapeError(f"categorical value {x!r} invalid for {len(node.log_probs)} states")
    return float(node.log_probs[k])


def _check_leaf_parameters(circuit: Circuit) -> None:
    for i, node in enumerate(circuit.nodes):
        if node.kind == "gaussian":
            if not (math.isfinite(node.mean) and math.isfinite(node.log_std)):
                raise ParameterError(f"non-finite Gaussian parameter at node {i}")
        elif node.kind == "categorical":
            if not np.all(np.asarray(node.log_probs) <= 0.0 + 1e-12):
                if np.any(np.isnan(node.log_probs)) or np.any(np.isposinf(node.log_probs)):
                    raise ParameterError(f"non-finite categorical parameter at node {i}")


def log_likelihood(circuit: Circuit, evidence) -> np.ndarray:
    """Log value of every class root for one evidence row.

    Sum nodes use log-sum-exp of (log weight + child log value); product nodes
    add child log values; marginalized leaves contribute 0.
    """
    values = as_evidence(evidence, circuit.num_variables)
    _check_leaf_parameters(circuit)
    logv = np.empty(len(circuit.nodes), dtype=np.float64)
    for i, node in enumerate(circuit.nodes):
        if node.kind == "sum":
            terms = node.log_weights + logv[node.children]
            logv[i] = _logsumexp(terms)
        elif node.kind == "product":
            logv[i] = float(np.sum(logv[node.children]))
        else:
            logv[i] = leaf_log_value(node, float(values[node.variable]))
    return logv[circuit.roots].copy()


def log_likelihood_batch(circuit: Circuit, X: np.ndarray) -> np.ndarray:
    """Log value of every class root for a batch: returns (rows, classes).

    Same recurrences as :func:`log_likelihood`, vectorized over rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != circuit.num_variables:
        raise ShapeError(f"batch has shape {X.shape}, expected (rows, {circuit.num_variables})")
    _check_leaf_parameters(circuit)
    logv = forward_log_values(circuit, X)
    return logv[circuit.roots].T.copy()


def forward_log_values(circuit: Circuit, X: np.ndarray) -> np.ndarray:
    """Per-node log values for a batch, shape (nodes, rows)."""
    rows = X.shape[0]
    logv = np.empty((len(circuit.nodes), rows), dtype=np.float64)
    for i, node in enumerate(circuit.nodes):
        if node.kind == "sum":
            terms = node.log_weights[:, None] + logv[node.children]
            logv[i] = _logsumexp_axis0(terms)
        elif node.kind == "product":
            logv[i] = logv[node.children].sum(axis=0)
        else:
            logv[i] = _leaf_log_values_batch(node, X[:, node.variable])
    return logv


def _leaf_log_values_batch(node: Node, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    observed = ~np.isnan(x)
    if node.kind == "gaussian":
        z = (x[observed] - node.mean) * math.exp(-node.log_std)
        out[observed] = -0.5 * z * z - node.log_std - 0.5 * LOG_2PI
    else:
        xo = x[observed]
        k = xo.astype(np.int64)
        if np.any(k != xo) or np.any(k < 0) or np.any(k >= len(node.log_probs)):
            raise ShapeError(f"categorical values invalid for {len(node.log_probs)} states")
        out[observed] = np.asarray(node.log_probs)[k]
    return out


def _logsumexp(terms: np.ndarray) -> float:
    m = float(np.max(terms))
    if m == -np.inf:
        return -np.inf
    return m + math.log(float(np.exp(terms - m).sum()))


def _logsumexp_axis0(terms: np.ndarray) -> np.ndarray:
    m = np.max(terms, axis=0)
    safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(terms - safe[None, :]).sum(axis=0))
    return np.where(np.isneginf(m), -np.inf, out)


# ---------------------------------------------------------------------------
# Serialization (versioned JSON circuit files)


def _node_to_json(node: Node) -> dict:
    if node.kind == "sum":
        return {
            "kind": "sum",
            "children": list(node.children),
            "log_weights": [float(w) for w in node.log_weights],
        }
    if node.kind == "product":
        return {"kind": "product", "children": list(node.children)}
    if node.kind == "gaussian":
        return {
            "kind": "gaussian",
            "variable": node.variable,
            "mean": float(node.mean),
            "log_std": float(node.log_std),
        }
    return {
        "kind": "categorical",
        "variable": node.variable,
        "log_probs": [float(p) for p in node.log_probs],
    }


def _node_from_json(obj: dict) -> Node:
    kind = obj.get("kind")
    try:
        if kind == "sum":
            return SumNode(list(obj["children"]), np.array(obj["log_weights"], dtype=np.float64))
        if kind == "product":
            return ProductNode(list(obj["children"]))
        if kind == "gaussian":
            return GaussianLeaf(int(obj["variable"]), float(obj["mean"]), float(obj["log_std"]))
        if kind == "categorical":
            return CategoricalLeaf(int(obj["variable"]), np.array(obj["log_probs"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"malformed node record: {exc}") from exc
    raise SerializationError(f"unknown node kind {kind!r}")


def _json_17(obj, out: list) -> None:
    """Minimal JSON writer printing floats with 17 significant digits.

    The stdlib encoder formats floats with repr and cannot be overridden from
    the C path, hence the hand-rolled writer.  Infinities use the tokens the
    stdlib parser accepts.
    """
    if obj is None:
        out.append("null")
    elif obj is True or obj is False:
        out.append("true" if obj else "false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if math.isnan(obj):
            out.append("NaN")
        elif math.isinf(obj):
            out.append("Infinity" if obj > 0 else "-Infinity")
        else:
            out.append(f"{obj:.17g}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for k, item in enumerate(obj):
            if k:
                out.append(", ")
            _json_17(item, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        for k, (key, value) in enumerate(obj.items()):
            if k:
                out.append(", ")
            out.append(json.dumps(str(key)) + ": ")
            _json_17(value, out)
        out.append("}")
    else:  # pragma: no cover - document construction bug
        raise SerializationError(f"cannot serialize {type(obj)}")


def serialize(circuit: Circuit) -> bytes:
    """Encode a valid circuit as the versioned JSON file format.

    Numbers carry 17 significant digits, so every double round-trips exactly.
    """
    report = validate(circuit)
    if not report.ok:
        raise SerializationError(f"refusing to serialize an invalid circuit:\n{report}")
    doc = {
        "version": CIRCUIT_FORMAT_VERSION,
        "num_variables": circuit.num_variables,
        "log_class_priors": [float(p) for p in circuit.log_class_priors],
        "roots": list(circuit.roots),
        "nodes": [_node_to_json(n) for n in circuit.nodes],
    }
    if circuit.rat is not None:
        doc["rat"] = {
            "sum_region": {str(k): list(v) for k, v in circuit.rat.sum_region.items()},
            "product_partition": {
                str(k): list(v) for k, v in circuit.rat.product_partition.items()
            },
        }
    out: list = []
    _json_17(doc, out)
    return "".join(out).encode("utf-8")


def deserialize(data: bytes) -> Circuit:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f"not a circuit file: {exc}") from exc
    if not isinstance(doc, dict):
        raise SerializationError("not a circuit file: top level is not an object")
    version = doc.get("version")
    if version != CIRCUIT_FORMAT_VERSION:
        raise SerializationError(f"unknown circuit file version {version!r}")
    try:
        circuit = Circuit(
            nodes=[_node_from_json(n) for n in doc["nodes"]],
            roots=[int(r) for r in doc["roots"]],
            num_variables=int(doc["num_variables"]),
            log_class_priors=np.array(doc["log_class_priors"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"malformed circuit file: {exc}") from exc
    if "rat" in doc:
        try:
            circuit.rat = RatAnnotation(
                sum_region={int(k): tuple(v) for k, v in doc["rat"]["sum_region"].items()},
                product_partition={
                    int(k): tuple(v) for k, v in doc["rat"]["product_partition"].items()
                },
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SerializationError(f"malformed rat annotation: {exc}") from exc
    report = validate(circuit)
    if not report.ok:
        raise SerializationError(f"circuit file fails validation:\n{report}")
    return circuit


def save(circuit: Circuit, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(circuit))


def load(path) -> Circuit:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
