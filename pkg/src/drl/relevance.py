"""Relation graphs over support and RoI nodes, and label propagation on them.

Nodes are ordered support first (block-major by class) then RoIs. Support
nodes are anchors: their embeddings are the one-hot labels and stay fixed.
RoI nodes drift: they start from the head's probability rows and are
re-weighted by a graph convolution whose adjacency is rebuilt from the
current features in every episode.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import numkernel as nk
from .episodes import Episode
from .metanet import FeatureBundle, cross_entropy, glorot, prob_labels
from .numkernel import ShapeError, Var

MetricKind = Literal["pearson", "cosine", "euclidean", "gaussian", "learned"]
METRICS: tuple[str, ...] = ("pearson", "cosine", "euclidean", "gaussian", "learned")


class DegenerateFeatureError(ValueError):
    pass


class DegenerateUpdateError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SimilarityMetric:
    kind: str = "pearson"
    bandwidth: float | None = None  # gaussian only; None -> median pairwise distance
    hidden: int = 16  # learned only

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"unknown similarity metric {self.kind!r}; choose from {METRICS}")


def init_similarity_params(feat_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "sim.w1": glorot(rng, feat_dim, hidden),
        "sim.b1": np.zeros((1, hidden)),
        "sim.w2": glorot(rng, hidden, 1),
        "sim.b2": np.zeros((1, 1)),
    }


def _symmetrize(s: Var) -> Var:
    return nk.scale(s + s.T, 0.5)


def _unit_diagonal(s: Var) -> Var:
    eye = np.eye(s.shape[0])
    return s * (1.0 - eye) + eye


def _unit_rows(x: Var, what: str) -> Var:
    norms = nk.sqrt(nk.clamp_min(nk.row_sum(x * x), 1e-300))
    scale_ref = 1.0 + np.abs(x.value).max(axis=1)
    bad = np.nonzero(norms.value.ravel() <= 1e-12 * scale_ref)[0]
    if bad.size:
        raise DegenerateFeatureError(f"node {int(bad[0])} has a {what} feature row")
    return x / norms


def _squared_distances(f: Var) -> Var:
    m = f.shape[0]
    diff = nk.pairwise_absdiff(f)
    return nk.reshape(nk.row_sum(diff * diff), (m, m))


def relation_matrix(metric: SimilarityMetric, features, sim_params: dict[str, Var] | None = None) -> Var:
    """Pairwise node similarity S (M x M)."""
    f = nk._lift(features)
    m, d = f.shape
    if m < 2:
        raise ShapeError("a relation matrix needs at least two nodes")
    kind = metric.kind
    if kind == "pearson":
        if d < 2:
            raise ShapeError("pearson similarity needs feature width >= 2")
        centered = f - nk.scale(nk.row_sum(f), 1.0 / d)
        z = _unit_rows(centered, "zero-variance")
        return _unit_diagonal(_symmetrize(z @ z.T))
    if kind == "cosine":
        z = _unit_rows(f, "zero-norm")
        return _unit_diagonal(_symmetrize(z @ z.T))
    if kind in ("euclidean", "gaussian"):
        d2 = _squared_distances(f)
        if kind == "euclidean":
            dist = nk.sqrt(nk.clamp_min(d2, 1e-24))
            return _unit_diagonal(1.0 / (1.0 + dist))
        bw = metric.bandwidth or median_bandwidth(f.value)
        return _unit_diagonal(nk.exp(nk.scale(d2, -1.0 / (2.0 * bw * bw))))
    # learned
    if sim_params is None:
        raise ValueError("the learned metric needs its MLP parameters")
    pairs = nk.pairwise_absdiff(f)
    h = nk.relu(pairs @ sim_params["sim.w1"] + sim_params["sim.b1"])
    out = h @ sim_params["sim.w2"] + sim_params["sim.b2"]
    return _symmetrize(nk.sigmoid(nk.reshape(out, (m, m))))


def median_bandwidth(f: np.ndarray) -> float:
    diff = f[:, None, :] - f[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    off = dist[~np.eye(len(f), dtype=bool)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


@dataclass
class RelevanceGraph:
    features: Var
    relation: Var
    x0: Var
    anchor_mask: np.ndarray
    anchor_rows: np.ndarray  # one-hot rows for anchors, zeros elsewhere
    drift_labels: np.ndarray  # column index of each RoI label in x0

    @property
    def n_nodes(self) -> int:
        return len(self.anchor_mask)

    @property
    def width(self) -> int:
        return self.x0.shape[1]


def prob_slots(class_ids, include_background: bool) -> np.ndarray:
    """Global slot of every probability column (background first if present)."""
    ids = np.asarray(class_ids, dtype=int)
    return np.concatenate([[0], ids + 1]) if include_background else ids


def build_graph(
    bundle: FeatureBundle,
    episode: Episode,
    metric: SimilarityMetric,
    sim_params: dict[str, Var] | None = None,
) -> RelevanceGraph:
    n_anchor = episode.n_classes * episode.shots
    width = bundle.prob.shape[1]
    cols = prob_labels(episode.support_labels, episode.include_background)
    onehot = np.zeros((n_anchor, width))
    onehot[np.arange(n_anchor), cols] = 1.0
    feats = nk.concat([bundle.support, bundle.roi], axis=0)
    x0 = nk.concat([onehot, bundle.prob], axis=0)
    mask = np.r_[np.ones(n_anchor, dtype=bool), np.zeros(episode.n_roi, dtype=bool)]
    anchor_rows = np.zeros((len(mask), width))
    anchor_rows[:n_anchor] = onehot
    return RelevanceGraph(
        features=feats,
        relation=relation_matrix(metric, feats, sim_params),
        x0=x0,
        anchor_mask=mask,
        anchor_rows=anchor_rows,
        drift_labels=prob_labels(episode.query_labels, episode.include_background),
    )


def graph_from_arrays(relation, x0, anchor_mask, drift_labels=None) -> RelevanceGraph:
    """Assemble a graph directly from S, X(0) and the anchor mask."""
    x0 = nk._lift(x0)
    mask = np.asarray(anchor_mask, dtype=bool)
    anchor_rows = np.where(mask[:, None], x0.value, 0.0)
    labels = np.zeros(int((~mask).sum()), dtype=int) if drift_labels is None else np.asarray(drift_labels)
    return RelevanceGraph(x0, nk._lift(relation), x0, mask, anchor_rows, labels)


@dataclass
class GcnStack:
    weights: list  # Var or ndarray, each D x D
    structure: Literal["normal", "residual"] = "normal"
    activation: str = "sigmoid"
    shift_negative: bool = False  # apply the group-loss pi shift to Z(l)
    scale_by_nodes: bool = False
    trace: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("a GCN stack needs at least one layer")
        if self.structure not in ("normal", "residual"):
            raise ValueError(f"unknown GCN structure {self.structure!r}")
        if self.activation not in nk.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for w in self.weights:
            shp = nk._lift(w).shape
            if shp[0] != shp[1]:
                raise ShapeError(f"GCN weights must be square, got {shp}")

    @property
    def depth(self) -> int:
        return len(self.weights)


def init_gcn_params(width: int, depth: int) -> dict[str, np.ndarray]:
    return {f"gcn.w{l}": np.eye(width) for l in range(1, depth + 1)}


def stack_for_episode(
    params: dict[str, Var],
    depth: int,
    slots: np.ndarray,
    structure: str = "normal",
    activation: str = "sigmoid",
    **kw,
) -> GcnStack:
    weights = [nk.take(params[f"gcn.w{l}"], rows=slots, cols=slots) for l in range(1, depth + 1)]
    return GcnStack(weights, structure, activation, **kw)


def gcn_forward(graph: RelevanceGraph, stack: GcnStack) -> Var:
    """Run the dynamic GCN; returns the final node embeddings (M x D).

    normal:   X(l+1) = Z(l), output renorm(Z(L) * X(0))
    residual: X(l+1) = renorm(Z(l) * X(l)) with anchors reset, output X(L+1)
    where Z(l) = act(S X(l) W(l)). Anchor rows of the output are their labels.
    """
    act = nk.ACTIVATIONS[stack.activation]
    s = graph.relation
    if stack.scale_by_nodes:
        s = nk.scale(s, 1.0 / graph.n_nodes)
    x0 = graph.x0
    if x0.shape[1] != nk._lift(stack.weights[0]).shape[0]:
        raise ShapeError(f"node width {x0.shape[1]} does not match GCN width {nk._lift(stack.weights[0]).shape[0]}")
    stack.trace = {"S": s.value, "x0": x0.value, "layers": {}}
    x = x0
    z = None
    for l, w in enumerate(stack.weights, start=1):
        z = act(nk.propagate(s, x) @ w)
        if stack.shift_negative:
            z = nk.shift_rows_nonnegative(z)
        stack.trace["layers"][l] = z.value
        if stack.structure == "residual":
            x = nk.set_rows(nk.renorm_rows(z * x), graph.anchor_mask, graph.anchor_rows)
        else:
            x = z
    if stack.structure == "normal":
        out = nk.renorm_rows(z * x0)
    else:
        out = x
    out = nk.set_rows(out, graph.anchor_mask, graph.anchor_rows)
    stack.trace["G_out"] = out.value
    return out


def drl_loss(g_out, anchor_mask, roi_labels) -> Var:
    """Cross-entropy of the drift rows of the GCN output against RoI labels."""
    g_out = nk._lift(g_out)
    drift = np.nonzero(~np.asarray(anchor_mask, dtype=bool))[0]
    if len(drift) != len(roi_labels):
        raise ShapeError(f"{len(drift)} drift nodes but {len(roi_labels)} labels")
    return cross_entropy(nk.take(g_out, rows=drift), roi_labels)


def group_loss_iterate(s, p0, anchor_onehots, steps: int) -> Var:
    """Replicator-style refinement of the drift probability rows.

    Anchors (first rows, one-hot) stay fixed. Each step computes the support
    ``pi = S x`` from all node rows, shifts each row of ``pi`` to be
    non-negative, and re-weights every drift row by its ``pi`` row.
    """
    if steps < 1:
        raise ValueError("group loss needs at least one iteration")
    s, p0 = nk._lift(s), nk._lift(p0)
    anchors = np.asarray(anchor_onehots, dtype=np.float64)
    n_a = anchors.shape[0]
    if s.shape[0] != n_a + p0.shape[0]:
        raise ShapeError("S must cover the anchors followed by the drift rows")
    drift = np.arange(n_a, s.shape[0])
    r = p0
    for _ in range(steps):
        x = nk.concat([anchors, r], axis=0)
        pi = nk.shift_rows_nonnegative(nk.take(nk.propagate(s, x), rows=drift))
        num = r * pi
        den = nk.row_sum(num)
        if np.any(den.value == 0):
            raise DegenerateUpdateError("all-zero normaliser in the replicator update")
        r = num / den
    return r


def class_separation(features, labels, warn: bool = True) -> float:
    """Mean silhouette coefficient under Euclidean distance.

    Points of classes with a single member are dropped (a warning reports how
    many). Needs at least two classes with two or more points each.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    singles = classes[counts < 2]
    if singles.size:
        if warn:
            warnings.warn(f"class_separation: excluded {singles.size} singleton class(es)", stacklevel=2)
        keep = ~np.isin(y, singles)
        x, y = x[keep], y[keep]
        classes = classes[counts >= 2]
    if classes.size < 2:
        raise ValueError("class_separation needs at least two classes with two or more points")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    member = y[:, None] == classes[None, :]
    sums = dist @ member
    sizes = member.sum(axis=0)
    own = member.argmax(axis=1)
    idx = np.arange(len(y))
    a = sums[idx, own] / (sizes[own] - 1)
    other = sums / sizes
    other[idx, own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    sil = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(sil))


def debug_dump(stack: GcnStack) -> dict:
    """JSON-ready record of S, X(0), each Z(l) keyed by layer, and the output."""
    t = stack.trace
    return {
        "S": t["S"].tolist(),
        "x0": t["x0"].tolist(),
        "layers": {str(k): v.tolist() for k, v in t["layers"].items()},
        "G_out": t["G_out"].tolist(),
    }
