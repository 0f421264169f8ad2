"""Experiment configuration: dataclasses, TOML loading and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .episodes import ConfigError, DatasetSpec
from .relevance import METRICS


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    feat_dim: int = 16
    sim_hidden: int = 16


@dataclass(frozen=True)
class TrainConfig:
    use_drl: bool = True
    use_meta: bool = True
    structure: str = "normal"
    depth: int = 2
    metric: str = "pearson"
    activation: str = "sigmoid"
    scale_by_nodes: bool = False
    shift_negative: bool = False
    group_loss: bool = False
    group_steps: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    base_episodes: int = 300
    finetune_episodes: int = 30
    eval_episodes: int = 20
    base_shots: int = 3
    finetune_shots: int = 3
    n_roi: int = 32
    reinit_gcn: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"train.depth must be >= 1, got {self.depth}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if self.structure not in ("normal", "residual"):
            raise ConfigError(f"train.structure must be normal or residual, got {self.structure!r}")
        if self.metric not in METRICS:
            raise ConfigError(f"train.metric must be one of {METRICS}, got {self.metric!r}")
        if self.activation not in ("sigmoid", "identity"):
            raise ConfigError(f"train.activation must be sigmoid or identity, got {self.activation!r}")
        if self.group_steps < 1:
            raise ConfigError("train.group_steps must be >= 1")
        for name in ("base_episodes", "finetune_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        for name in ("eval_episodes", "base_shots", "finetune_shots", "n_roi"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.train.validate()
        if self.model.feat_dim < 2 or self.model.hidden_dim < 1:
            raise ConfigError("model.feat_dim must be >= 2 and model.hidden_dim >= 1")
        if self.train.base_shots > self.data.base_shots:
            raise ConfigError("train.base_shots exceeds data.base_shots")
        if self.train.finetune_shots > self.data.novel_shots:
            raise ConfigError("train.finetune_shots exceeds data.novel_shots")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(train={"use_drl": False})``"""
        out = {}
        for name, changes in sections.items():
            out[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **out)


SECTIONS = {"data": DatasetSpec, "model": ModelConfig, "train": TrainConfig}


def _coerce(cls, key: str, value, where: str):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    if key not in types:
        raise ConfigError(f"{where}: unknown field {key!r}")
    t = types[key]
    try:
        if t == "bool" or t is bool:
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "on", "off"):
                    raise ValueError(value)
                return low in ("true", "1", "on")
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if t == "int" or t is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if t == "float" or t is float:
            return float(value)
        if t == "str" or t is str:
            return str(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot interpret {value!r} for field {key!r} ({t})") from None
    return value


def from_dict(doc: dict) -> ExperimentConfig:
    kwargs = {}
    for name, body in doc.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        cls = SECTIONS[name]
        kwargs[name] = cls(**{k: _coerce(cls, k, v, name) for k, v in body.items()})
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return from_dict(doc)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.field=value`` strings; a bare ``field`` is looked up in every section."""
    changes: dict[str, dict] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
        else:
            hits = [s for s, cls in SECTIONS.items() if name_in(cls, key)]
            if len(hits) != 1:
                raise ConfigError(f"override key {key!r} is {'ambiguous' if hits else 'unknown'}; use section.field")
            section, name = hits[0], key
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        changes.setdefault(section, {})[name] = _coerce(SECTIONS[section], name, value.strip(), section)
    return cfg.replace(**changes)


def name_in(cls, key: str) -> bool:
    return any(f.name == key for f in dataclasses.fields(cls))


def to_toml(cfg: ExperimentConfig) -> str:
    lines = []
    for name, body in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in body.items():
            if isinstance(v, bool):
                lines.append(f"{k} = {'true' if v else 'false'}")
            elif isinstance(v, str):
                lines.append(f'{k} = "{v}"')
            else:
                lines.append(f"{k} = {v!r}")
        lines.append("")
    return "\n".join(lines)
