"""Synthetic full-way K-shot episodes built from Gaussian class clusters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

Stage = Literal["base", "fine_tune"]


class ConfigError(ValueError):
    pass


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    base_class_count: int = 5
    novel_class_count: int = 5
    base_shots: int = 200
    novel_shots: int = 10
    raw_dim: int = 16
    class_mean_radius: float = 4.0
    within_class_std: float = 1.5
    background_std: float = 3.0
    include_background: bool = True
    background_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.raw_dim < 2:
            raise ConfigError(f"raw_dim must be >= 2, got {self.raw_dim}")
        if self.class_mean_radius <= 0:
            raise ConfigError("class_mean_radius must be positive (otherwise all class means coincide)")
        if self.base_class_count < 1 or self.novel_class_count < 0:
            raise ConfigError("need at least one base class and a non-negative novel class count")
        if not self.base_shots >= self.novel_shots >= 1:
            raise ConfigError(f"need base_shots >= novel_shots >= 1, got {self.base_shots}, {self.novel_shots}")
        if self.within_class_std < 0 or self.background_std < 0:
            raise ConfigError("standard deviations must be non-negative")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ConfigError("background_fraction must lie in [0, 1)")

    @property
    def total_classes(self) -> int:
        return self.base_class_count + self.novel_class_count


@dataclass
class Episode:
    """One support set plus query RoIs.

    ``class_ids`` holds global class indices (base classes first, then novel).
    ``support_labels`` are local ids in [1, C], block-major by class with
    ``shots`` rows each; ``query_labels`` are local ids in [0, C] where 0 is
    background.
    """

    class_ids: list[int]
    shots: int
    support_raw: np.ndarray
    support_labels: np.ndarray
    query_raw: np.ndarray
    query_labels: np.ndarray
    stage: Stage
    include_background: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def n_roi(self) -> int:
        return len(self.query_labels)

    @property
    def n_nodes(self) -> int:
        return self.n_classes * self.shots + self.n_roi

    def to_json(self) -> dict:
        return {
            "class_ids": list(map(int, self.class_ids)),
            "shots": int(self.shots),
            "stage": self.stage,
            "include_background": bool(self.include_background),
            "support_raw": self.support_raw.tolist(),
            "support_labels": self.support_labels.tolist(),
            "query_raw": self.query_raw.tolist(),
            "query_labels": self.query_labels.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        return cls(
            class_ids=list(d["class_ids"]),
            shots=d["shots"],
            support_raw=np.array(d["support_raw"], dtype=np.float64),
            support_labels=np.array(d["support_labels"], dtype=int),
            query_raw=np.array(d["query_raw"], dtype=np.float64),
            query_labels=np.array(d["query_labels"], dtype=int),
            stage=d["stage"],
            include_background=d["include_background"],
        )


@dataclass
class EpisodeGenerator:
    spec: DatasetSpec
    class_means: np.ndarray
    pools: list[np.ndarray] = field(repr=False)

    @property
    def base_classes(self) -> list[int]:
        return list(range(self.spec.base_class_count))

    @property
    def novel_classes(self) -> list[int]:
        return list(range(self.spec.base_class_count, self.spec.total_classes))

    def sample_episode(self, stage: Stage, shots: int, n_roi: int, rng: np.random.Generator) -> Episode:
        return sample_episode(self, stage, shots, n_roi, rng)


def make_generator(spec: DatasetSpec) -> EpisodeGenerator:
    """Fix class means on a sphere and draw the per-class support pools.

    Base classes get pools of ``base_shots`` samples and novel classes pools of
    ``novel_shots``; episodes draw their support sets from these pools.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 101])))
    g = rng.standard_normal((spec.total_classes, spec.raw_dim))
    means = spec.class_mean_radius * g / np.linalg.norm(g, axis=1, keepdims=True)
    pools = []
    for c in range(spec.total_classes):
        n = spec.base_shots if c < spec.base_class_count else spec.novel_shots
        pools.append(means[c] + spec.within_class_std * rng.standard_normal((n, spec.raw_dim)))
    return EpisodeGenerator(spec, means, pools)


def sample_episode(
    gen: EpisodeGenerator,
    stage: Stage,
    shots: int,
    n_roi: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode.

    Base episodes cover the base classes; fine-tune episodes cover base and
    novel classes together. Support rows come from the fixed pools, query
    RoIs are fresh draws (background RoIs from a zero-centred Gaussian).
    """
    spec = gen.spec
    if shots < 1 or n_roi < 1:
        raise ValueError("shots and n_roi must be >= 1")
    if stage == "base":
        classes = gen.base_classes
        budget = spec.base_shots
    elif stage == "fine_tune":
        classes = gen.base_classes + gen.novel_classes
        budget = spec.novel_shots if spec.novel_class_count else spec.base_shots
    else:
        raise ValueError(f"unknown stage {stage!r}")
    if shots > budget:
        raise BudgetError(f"{shots} shots requested but the {stage} budget is {budget} per class")

    C = len(classes)
    support = []
    for c in classes:
        idx = rng.choice(len(gen.pools[c]), size=shots, replace=False)
        support.append(gen.pools[c][np.sort(idx)])
    support_raw = np.concatenate(support, axis=0)
    support_labels = np.repeat(np.arange(1, C + 1), shots)

    if spec.include_background:
        is_bg = rng.random(n_roi) < spec.background_fraction
    else:
        is_bg = np.zeros(n_roi, dtype=bool)
    fg_local = rng.integers(1, C + 1, size=n_roi)
    noise = rng.standard_normal((n_roi, spec.raw_dim))
    centers = gen.class_means[np.asarray(classes)[fg_local - 1]]
    query_raw = np.where(is_bg[:, None], spec.background_std * noise, centers + spec.within_class_std * noise)
    query_labels = np.where(is_bg, 0, fg_local)

    return Episode(
        class_ids=list(classes),
        shots=shots,
        support_raw=support_raw,
        support_labels=support_labels,
        query_raw=query_raw,
        query_labels=query_labels.astype(int),
        stage=stage,
        include_background=spec.include_background,
    )


def write_episodes(path: str | Path, episodes: Iterable[Episode]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json()) + "\n")


def read_episodes(path: str | Path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_json(json.loads(line)) for line in fh if line.strip()]
