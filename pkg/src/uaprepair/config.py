"""Experiment configuration: one structured file plus ``--set key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attack import AttackConfig
from .data import DATASETS, BlobConfig
from .defense import DefenseConfig
from .model import ARCHITECTURES, TrainConfig

ARTIFACT_ENV = "UAPREPAIR_ARTIFACTS"


class ConfigError(ValueError):
    pass


@dataclass
class ThreatConfig:
    """Attacker-side settings shared by every attack subcommand."""

    epsilon: float = 10 / 255
    target_class: int = 0
    patch_fraction: float = 0.02
    settings: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class EvalConfig:
    batch_size: int = 256
    probe: str | None = None
    epsilons: list = field(default_factory=lambda: [5 / 255, 10 / 255, 15 / 255])


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic-blobs"
    arch: str = "small_cnn"
    data_root: str = "data"
    artifact_dir: str = "artifacts"
    seed: int = 0
    clean_fraction: float = 0.05
    blobs: BlobConfig = field(default_factory=BlobConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: ThreatConfig = field(default_factory=ThreatConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: unknown id {self.dataset!r}; choose from {DATASETS}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch: unknown id {self.arch!r}; choose from {ARCHITECTURES}")
        if not 0 < self.clean_fraction <= 0.05:
            raise ConfigError(f"clean_fraction: must lie in (0, 0.05], got {self.clean_fraction}")
        if not self.attack.epsilon > 0:
            raise ConfigError("attack.epsilon: must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def artifacts(self) -> Path:
        return Path(self.artifact_dir)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{where}{key}: unknown field; expected one of {sorted(known)}")
        sub = _nested_type(known[key])
        kwargs[key] = _build(sub, value, f"{where}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {exc}") from exc


_NESTED = {
    "blobs": BlobConfig, "train": TrainConfig, "attack": ThreatConfig, "settings": AttackConfig,
    "defense": DefenseConfig, "eval": EvalConfig,
}


def _nested_type(f):
    return _NESTED.get(f.name)


def _parse_value(text: str):
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        try:
            return float(value)  # YAML 1.1 reads "1e30" as a string
        except ValueError:
            pass
    return value


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict (values parsed as YAML scalars)."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {part} is not a section")
        node[parts[-1]] = _parse_value(text)
    return raw


def load_config(path=None, overrides=None, env=None) -> ExperimentConfig:
    """Read YAML or JSON, apply overrides, then the artifact-root environment variable."""
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            raw = (json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)) or {}
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if env.get(ARTIFACT_ENV):
        raw["artifact_dir"] = env[ARTIFACT_ENV]
    return _build(ExperimentConfig, raw, "").validate()


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
