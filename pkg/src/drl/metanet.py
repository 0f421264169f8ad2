"""Meta-detector head over synthetic region features.

A two-layer extractor embeds support samples and query RoIs with shared
weights. Class-attentive vectors are sigmoids of per-class mean support
features; each RoI is aggregated with every class vector and pushed through a
shared linear head, reading one logit per class.

Parameters live in a flat ``dict[str, ndarray]`` so they can be checkpointed
and registered on a tape by name. The head and meta classifier are sized for
every class the dataset knows about; an episode reads only the slots of the
classes it contains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .episodes import Episode
from .numkernel import ShapeError, Tape, Var


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class NetShape:
    raw_dim: int = 16
    hidden_dim: int = 32
    feat_dim: int = 16
    n_classes: int = 10
    include_background: bool = True

    @property
    def out_dim(self) -> int:
        return self.n_classes + (1 if self.include_background else 0)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(shape: NetShape, rng: np.random.Generator) -> dict[str, np.ndarray]:
    f = shape.feat_dim
    return {
        "ext.w1": glorot(rng, shape.raw_dim, shape.hidden_dim),
        "ext.b1": np.zeros((1, shape.hidden_dim)),
        "ext.w2": glorot(rng, shape.hidden_dim, f),
        "ext.b2": np.zeros((1, f)),
        "head.w": glorot(rng, 3 * f, shape.out_dim),
        "head.b": np.zeros((1, shape.out_dim)),
        "meta.w": glorot(rng, f, shape.n_classes),
        "meta.b": np.zeros((1, shape.n_classes)),
    }


def register(tape: Tape, params: dict[str, np.ndarray], prefix: str = "") -> dict[str, Var]:
    return {k: tape.param(k, v) for k, v in params.items() if k.startswith(prefix)}


def lift(params: dict[str, np.ndarray]) -> dict[str, Var]:
    """Wrap parameters as constants (no tape) for read-only evaluation."""
    return {k: Var(v) for k, v in params.items()}


def head_slots(class_ids, include_background: bool) -> np.ndarray:
    """Output slot of each global class id in the shared head."""
    ids = np.asarray(class_ids, dtype=int)
    return ids + 1 if include_background else ids


def extract(p: dict[str, Var], raws) -> Var:
    raws = nk._lift(raws)
    if raws.shape[1] != p["ext.w1"].shape[0]:
        raise ShapeError(f"raw width {raws.shape[1]} does not match extractor input {p['ext.w1'].shape[0]}")
    h = nk.relu(raws @ p["ext.w1"] + p["ext.b1"])
    return h @ p["ext.w2"] + p["ext.b2"]


def class_attentive(v, n_classes: int, shots: int) -> Var:
    """sigmoid of the per-class mean of block-major support rows."""
    return nk.sigmoid(nk.shot_mean(v, n_classes, shots))


def aggregate(r, a) -> Var:
    """Row-wise [r * a, r - a, r]."""
    r, a = nk._lift(r), nk._lift(a)
    if r.shape != a.shape:
        raise ShapeError(f"aggregate needs equal shapes, got {r.shape} and {a.shape}")
    return nk.concat([r * a, r - a, r], axis=1)


def aggregate_pairs(r, a) -> Var:
    """Aggregate every RoI with every class vector; rows ordered RoI-major."""
    r, a = nk._lift(r), nk._lift(a)
    n, C = r.shape[0], a.shape[0]
    return aggregate(nk.take(r, rows=np.repeat(np.arange(n), C)), nk.take(a, rows=np.tile(np.arange(C), n)))


def classify(p: dict[str, Var], rhat, n_roi: int, class_ids, include_background: bool) -> Var:
    """Probability rows of width C (+1 with background) for each RoI.

    The logit of class c comes from the class-c aggregated row at that class's
    head slot. The background logit comes from the mean aggregated row of the
    RoI, read at slot 0.
    """
    rhat = nk._lift(rhat)
    C = len(class_ids)
    if rhat.shape[0] != n_roi * C:
        raise ShapeError(f"expected {n_roi * C} aggregated rows ({n_roi} RoIs x {C} classes), got {rhat.shape[0]}")
    h = rhat @ p["head.w"] + p["head.b"]
    slots = head_slots(class_ids, include_background)
    logits = nk.reshape(nk.pick(h, np.arange(n_roi * C), np.tile(slots, n_roi)), (n_roi, C))
    if include_background:
        avg = np.kron(np.eye(n_roi), np.full((1, C), 1.0 / C))
        hb = nk.matmul(avg, rhat) @ p["head.w"] + p["head.b"]
        logits = nk.concat([nk.take(hb, cols=[0]), logits], axis=1)
    return nk.row_softmax(logits)


def _label_index(labels, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise LabelError(f"labels must lie in [0, {width}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(prob, labels) -> Var:
    """-(1/n) sum log prob[i, label_i] with a floored log."""
    prob = nk._lift(prob)
    idx = _label_index(labels, prob.shape[1])
    picked = nk.pick(prob, np.arange(len(idx)), idx)
    return nk.scale(nk.sorted_mean(nk.safe_log(picked)), -1.0)


def cls_loss(prob, labels) -> Var:
    return cross_entropy(prob, labels)


def meta_loss(p: dict[str, Var], v, labels, class_ids) -> Var:
    """Support-set classification loss; ``labels`` are local ids in [1, C]."""
    labels = np.asarray(labels, dtype=int)
    C = len(class_ids)
    if labels.size and (labels.min() < 1 or labels.max() > C):
        raise LabelError(f"support labels must lie in [1, {C}]")
    logits = nk.take(nk._lift(v) @ p["meta.w"] + p["meta.b"], cols=np.asarray(class_ids, dtype=int))
    return cross_entropy(nk.row_softmax(logits), labels - 1)


def prob_labels(query_labels, include_background: bool) -> np.ndarray:
    """Column index of each query label inside a probability row."""
    q = np.asarray(query_labels, dtype=int)
    return q if include_background else q - 1


@dataclass
class FeatureBundle:
    support: Var
    attentive: Var
    roi: Var
    aggregated: Var
    prob: Var


def forward(p: dict[str, Var], episode: Episode) -> FeatureBundle:
    C, K = episode.n_classes, episode.shots
    v = extract(p, episode.support_raw)
    a = class_attentive(v, C, K)
    r = extract(p, episode.query_raw)
    rhat = aggregate_pairs(r, a)
    prob = classify(p, rhat, episode.n_roi, episode.class_ids, episode.include_background)
    return FeatureBundle(v, a, r, rhat, prob)


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    doc = {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(params.items())}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return {k: np.array(d["data"], dtype=np.float64).reshape(d["shape"]) for k, d in doc.items()}
