"""Finite-difference verification of the full training objective."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import metanet as mn
from . import numkernel as nk
from . import training as tr
from .config import ExperimentConfig
from .episodes import DatasetSpec, Episode, make_generator


@dataclass
class SuiteCase:
    structure: str
    depth: int
    metric: str
    report: nk.GradCheckReport

    @property
    def label(self) -> str:
        return f"{self.structure}/L={self.depth}/{self.metric}"


def tiny_setup(
    structure: str = "normal",
    depth: int = 1,
    metric: str = "pearson",
    n_classes: int = 3,
    shots: int = 2,
    n_roi: int = 5,
    feat_dim: int = 8,
    seed: int = 0,
) -> tuple[ExperimentConfig, dict[str, np.ndarray], Episode]:
    """A small base-stage instance with every loss term switched on.

    GCN weights and biases are perturbed away from their initial values so
    that no gradient entry is trivially zero.
    """
    cfg = ExperimentConfig(
        data=DatasetSpec(base_class_count=n_classes, novel_class_count=0, base_shots=max(5, shots),
                         novel_shots=1, raw_dim=6, seed=seed),
    ).replace(
        model={"feat_dim": feat_dim, "hidden_dim": 6, "sim_hidden": 5},
        train={"structure": structure, "depth": depth, "metric": metric, "use_drl": True, "use_meta": True,
               "base_shots": shots, "finetune_shots": 1, "n_roi": n_roi, "seed": seed},
    )
    gen = make_generator(cfg.data)
    episode = gen.sample_episode("base", shots, n_roi, nk.make_rng(seed, 31))
    params = tr.init_params(cfg)
    rng = nk.make_rng(seed, 32)
    for k in params:
        if k.startswith("gcn."):
            params[k] = params[k] + 0.3 * rng.standard_normal(params[k].shape)
        elif k.endswith("b") or k.endswith("b1") or k.endswith("b2"):
            params[k] = 0.1 * rng.standard_normal(params[k].shape)
    return cfg, params, episode


def full_objective(cfg: ExperimentConfig, params: dict[str, np.ndarray], episode: Episode):
    def f(tape: nk.Tape):
        return tr.episode_losses(mn.register(tape, params), episode, cfg).objective
    return f


def gradient_suite(step: float = 1e-5, tolerance: float = 1e-4) -> list[SuiteCase]:
    """L_cls + L_meta + L_drl through both structures, L in {1, 3}, pearson and learned."""
    cases = []
    for structure, depth, metric in itertools.product(("normal", "residual"), (1, 3), ("pearson", "learned")):
        cfg, params, episode = tiny_setup(structure, depth, metric)
        report = nk.gradient_check(full_objective(cfg, params, episode), params, step, tolerance)
        cases.append(SuiteCase(structure, depth, metric, report))
    return cases
