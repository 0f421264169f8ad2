"""Episodic training: loss composition, SGD with momentum, the two-stage schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metanet as mn
from . import numkernel as nk
from . import relevance as rel
from .config import ExperimentConfig
from .episodes import Episode, EpisodeGenerator, make_generator
from .numkernel import Tape, Var

STAGE_CODES = {"base": 1, "fine_tune": 2, "eval": 3}


class NonFiniteLossError(ArithmeticError):
    pass


@dataclass
class LossReport:
    stage: str
    l_cls: float
    l_meta: float
    l_drl: float
    total: float
    objective: Var | None = field(default=None, repr=False, compare=False)

    def row(self, episode: int) -> dict:
        return {
            "stage": self.stage,
            "episode": episode,
            "l_cls": self.l_cls,
            "l_meta": self.l_meta,
            "l_drl": self.l_drl,
            "total": self.total,
        }


def _scalar(x) -> float:
    if x is None:
        return 0.0
    return float(x.value.item()) if isinstance(x, Var) else float(x)


def compose_loss(stage: str, l_cls, l_meta=0.0, l_drl=0.0, use_meta: bool = True, use_drl: bool = True) -> LossReport:
    """Unit-weight sum of the enabled terms. The meta term never enters fine-tuning."""
    for name, part in (("l_cls", l_cls), ("l_meta", l_meta), ("l_drl", l_drl)):
        if not math.isfinite(_scalar(part)):
            raise NonFiniteLossError(f"{name} is not finite ({_scalar(part)})")
    take_meta = use_meta and stage == "base"
    terms = [l_cls]
    if take_meta:
        terms.append(l_meta)
    if use_drl:
        terms.append(l_drl)
    objective = terms[0]
    for t in terms[1:]:
        objective = objective + t
    return LossReport(
        stage=stage,
        l_cls=_scalar(l_cls),
        l_meta=_scalar(l_meta) if take_meta else 0.0,
        l_drl=_scalar(l_drl) if use_drl else 0.0,
        total=_scalar(objective),
        objective=objective if isinstance(objective, Var) else None,
    )


def sgd_step(params, grads, lr: float, momentum: float, velocity=None):
    """v <- momentum * v + g ; theta <- theta - lr * v. Returns new dicts."""
    velocity = velocity or {}
    new_p, new_v = {}, {}
    for k, theta in params.items():
        g = grads.get(k)
        if g is None:
            new_p[k], new_v[k] = theta, velocity.get(k, np.zeros_like(theta))
            continue
        v = momentum * velocity.get(k, np.zeros_like(theta)) + g
        new_v[k] = v
        new_p[k] = theta - lr * v
    return new_p, new_v


def net_shape(cfg: ExperimentConfig) -> mn.NetShape:
    return mn.NetShape(
        raw_dim=cfg.data.raw_dim,
        hidden_dim=cfg.model.hidden_dim,
        feat_dim=cfg.model.feat_dim,
        n_classes=cfg.data.total_classes,
        include_background=cfg.data.include_background,
    )


def init_params(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    rng = nk.make_rng(cfg.train.seed, 0)
    shape = net_shape(cfg)
    params = mn.init_params(shape, rng)
    params.update(rel.init_gcn_params(shape.out_dim, cfg.train.depth))
    if cfg.train.metric == "learned":
        params.update(rel.init_similarity_params(cfg.model.feat_dim, cfg.model.sim_hidden, rng))
    return params


def episode_losses(p: dict[str, Var], episode: Episode, cfg: ExperimentConfig) -> LossReport:
    """Forward one episode and compose its training objective."""
    t = cfg.train
    bundle = mn.forward(p, episode)
    l_cls = mn.cls_loss(bundle.prob, mn.prob_labels(episode.query_labels, episode.include_background))
    l_meta = 0.0
    if t.use_meta and episode.stage == "base":
        l_meta = mn.meta_loss(p, bundle.support, episode.support_labels, episode.class_ids)
    l_drl = 0.0
    if t.use_drl:
        l_drl = drl_term(p, bundle, episode, cfg)
    return compose_loss(episode.stage, l_cls, l_meta, l_drl, t.use_meta, t.use_drl)


def drl_term(p: dict[str, Var], bundle: mn.FeatureBundle, episode: Episode, cfg: ExperimentConfig) -> Var:
    t = cfg.train
    metric = rel.SimilarityMetric(t.metric)
    sim = {k: v for k, v in p.items() if k.startswith("sim.")} or None
    graph = rel.build_graph(bundle, episode, metric, sim)
    if t.group_loss:
        n_a = int(graph.anchor_mask.sum())
        refined = rel.group_loss_iterate(graph.relation, bundle.prob, graph.anchor_rows[:n_a], t.group_steps)
        return mn.cross_entropy(refined, graph.drift_labels)
    slots = rel.prob_slots(episode.class_ids, episode.include_background)
    stack = rel.stack_for_episode(p, t.depth, slots, t.structure, t.activation,
                                   shift_negative=t.shift_negative, scale_by_nodes=t.scale_by_nodes)
    g_out = rel.gcn_forward(graph, stack)
    return rel.drl_loss(g_out, graph.anchor_mask, graph.drift_labels)


def train_stage(
    gen: EpisodeGenerator,
    cfg: ExperimentConfig,
    stage: str,
    params: dict[str, np.ndarray] | None = None,
    from_scratch: bool = False,
) -> tuple[dict[str, np.ndarray], list[LossReport]]:
    """One episode per SGD step; returns the new parameters and per-episode losses."""
    t = cfg.train
    if params is None:
        if stage == "fine_tune" and not from_scratch:
            raise ValueError("fine-tuning needs base-trained parameters (or from_scratch=True)")
        params = init_params(cfg)
    n_episodes = t.base_episodes if stage == "base" else t.finetune_episodes
    shots = t.base_shots if stage == "base" else t.finetune_shots
    rng = nk.make_rng(t.seed, STAGE_CODES[stage])
    velocity: dict[str, np.ndarray] = {}
    reports = []
    for i in range(n_episodes):
        episode = gen.sample_episode(stage, shots, t.n_roi, rng)
        tape = Tape()
        p = mn.register(tape, params)
        try:
            report = episode_losses(p, episode, cfg)
        except (NonFiniteLossError, nk.EvaluationError) as exc:
            raise NonFiniteLossError(f"{stage} episode {i}: {exc}") from exc
        grads = tape.backward(report.objective)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLossError(f"{stage} episode {i}: non-finite gradient")
        params, velocity = sgd_step(params, grads, t.lr, t.momentum, velocity)
        report.objective = None
        reports.append(report)
    return params, reports


@dataclass
class EvalReport:
    query_accuracy: float
    novel_accuracy: float
    per_class_accuracy: dict[int, float]
    class_separation: float
    episodes: int

    def to_dict(self) -> dict:
        return {
            "query_accuracy": self.query_accuracy,
            "novel_accuracy": self.novel_accuracy,
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "class_separation": self.class_separation,
            "episodes": self.episodes,
        }


def evaluate(gen: EpisodeGenerator, cfg: ExperimentConfig, params: dict[str, np.ndarray], episodes: int | None = None) -> EvalReport:
    """Accuracy of argmax over the head's probability rows on held-out episodes.

    The relevance graph is not used here. Per-class keys are global class ids,
    with -1 for background. Separation is measured on the pooled foreground
    RoI features.
    """
    n = cfg.train.eval_episodes if episodes is None else episodes
    if n < 1:
        raise ValueError("evaluate needs at least one episode")
    rng = nk.make_rng(cfg.train.seed, STAGE_CODES["eval"])
    p = mn.lift(params)
    truths, preds, feats = [], [], []
    for _ in range(n):
        ep = gen.sample_episode("fine_tune", cfg.train.finetune_shots, cfg.train.n_roi, rng)
        bundle = mn.forward(p, ep)
        cols = np.argmax(bundle.prob.value, axis=1)
        glob = np.asarray(ep.class_ids)
        offset = 1 if ep.include_background else 0
        truth = np.where(ep.query_labels > 0, glob[np.maximum(ep.query_labels, 1) - 1], -1)
        local_pred = cols + (1 - offset)
        pred = np.where(local_pred > 0, glob[np.maximum(local_pred, 1) - 1], -1)
        truths.append(truth)
        preds.append(pred)
        feats.append(bundle.roi.value)
    y = np.concatenate(truths)
    yhat = np.concatenate(preds)
    f = np.concatenate(feats)
    per_class = {int(c): float(np.mean(yhat[y == c] == c)) for c in np.unique(y)}
    novel = np.isin(y, gen.novel_classes)
    fg = y >= 0
    return EvalReport(
        query_accuracy=float(np.mean(yhat == y)),
        novel_accuracy=float(np.mean(yhat[novel] == y[novel])) if novel.any() else float("nan"),
        per_class_accuracy=per_class,
        class_separation=_separation(f[fg], y[fg]),
        episodes=n,
    )


def _separation(features: np.ndarray, labels: np.ndarray) -> float:
    # too few points per class in a tiny evaluation leaves the score undefined
    try:
        return rel.class_separation(features, labels, warn=False)
    except ValueError:
        return float("nan")


@dataclass
class RunResult:
    params: dict[str, np.ndarray]
    base_params: dict[str, np.ndarray]
    losses: list[LossReport]
    eval: EvalReport


def run_experiment(cfg: ExperimentConfig, gen: EpisodeGenerator | None = None) -> RunResult:
    """Base training, fine-tuning on base plus novel classes, then evaluation."""
    cfg.validate()
    gen = gen or make_generator(cfg.data)
    params, base_losses = train_stage(gen, cfg, "base")
    base_params = dict(params)
    if cfg.train.reinit_gcn:
        params.update(rel.init_gcn_params(net_shape(cfg).out_dim, cfg.train.depth))
    params, ft_losses = train_stage(gen, cfg, "fine_tune", params)
    return RunResult(params, base_params, base_losses + ft_losses, evaluate(gen, cfg, params))
