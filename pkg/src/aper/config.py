"""Experiment configuration: nested dataclasses read from YAML.

Unknown keys are errors, and every validation message names the offending
field (``peft.method: ...``).  ``dump_config(load_config_text(t))`` parses back
to an equal config.
"""
from __future__ import annotations

import dataclasses
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .exceptions import ConfigurationError
from .learner import LearnerConfig
from .peft import PEFTConfig
from .projection import PROJECTION_METHODS
from .stream import AffineShift, StreamConfig, SyntheticSpec

DATASET_SOURCES = ("synthetic", "directory", "cifar100")


def sub_seed(seed: int, name: str) -> int:
    """Seed for one named component, derived from the experiment seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class ShiftConfig:
    gain: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    amplify: float = 0.0
    amplify_patterns: tuple = (0, 0)

    def build(self) -> AffineShift:
        return AffineShift(gain=self.gain, offset=self.offset, amplify=self.amplify,
                           amplify_patterns=self.amplify_patterns)


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 20
    train_per_class: int = 30
    test_per_class: int = 20
    shape: tuple = (16, 16, 3)
    n_patterns: int = 16
    pattern_offset: int = 0
    separation: float = 1.0
    noise: float = 0.5
    world_seed: int = 0
    shift: Optional[ShiftConfig] = None

    def spec(self, class_seed: int) -> SyntheticSpec:
        return SyntheticSpec(n_classes=self.n_classes, train_per_class=self.train_per_class,
                             test_per_class=self.test_per_class, shape=self.shape,
                             n_patterns=self.n_patterns, pattern_offset=self.pattern_offset,
                             separation=self.separation, noise=self.noise,
                             world_seed=self.world_seed, class_seed=class_seed,
                             shift=self.shift.build() if self.shift else None)


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigurationError(f"source must be one of {DATASET_SOURCES}, got {self.source!r}")
        if self.source != "synthetic":
            if self.path is None:
                raise ConfigurationError(f"source {self.source!r} needs a path")
            if not Path(self.path).is_dir():
                raise ConfigurationError(f"path {self.path!r} is not a directory")


@dataclass(frozen=True)
class StreamSection:
    base_m: int = 0
    inc_n: int = 5

    def build(self, total_classes: int, seed: int) -> StreamConfig:
        return StreamConfig(total_classes=total_classes, base_m=self.base_m, inc_n=self.inc_n,
                            seed=seed)


@dataclass(frozen=True)
class PretrainConfig:
    """Supervised pretraining of a fresh toy backbone on a synthetic source domain."""
    n_classes: int = 20
    train_per_class: int = 40
    n_patterns: int = 16
    pattern_offset: int = 0
    separation: float = 1.0
    noise: float = 0.5
    world_seed: int = 0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def spec(self, shape, class_seed: int) -> SyntheticSpec:
        return SyntheticSpec(n_classes=self.n_classes, train_per_class=self.train_per_class,
                             test_per_class=1, shape=tuple(shape), n_patterns=self.n_patterns,
                             pattern_offset=self.pattern_offset, separation=self.separation,
                             noise=self.noise, world_seed=self.world_seed, class_seed=class_seed)


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "toy-vit"
    options: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    pretrain: Optional[PretrainConfig] = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.kind not in ("toy-vit", "toy-cnn", "identity"):
            raise ConfigurationError(f"kind must be toy-vit, toy-cnn or identity, got {self.kind!r}")
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise ConfigurationError(f"checkpoint {self.checkpoint!r} does not exist")


@dataclass(frozen=True)
class LearnerSection:
    mode: str = "simplecil"
    adapt_stages: Optional[int] = None


@dataclass(frozen=True)
class ProjectionConfig:
    method: str = "pca"
    k: int = 32

    def __post_init__(self):
        if self.method not in PROJECTION_METHODS:
            raise ConfigurationError(f"method must be one of {PROJECTION_METHODS}, got {self.method!r}")
        if self.k < 1:
            raise ConfigurationError("k must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    stream: StreamSection = field(default_factory=StreamSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    learner: LearnerSection = field(default_factory=LearnerSection)
    peft: PEFTConfig = field(default_factory=PEFTConfig)
    projection: Optional[ProjectionConfig] = None
    plot: bool = True

    def __post_init__(self):
        try:
            self.learner_config()
        except ConfigurationError as exc:
            raise ConfigurationError(f"learner: {exc}") from None

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(mode=self.learner.mode, peft=self.peft,
                             adapt_stages=self.learner.adapt_stages,
                             seed=sub_seed(self.seed, "adapt"))

    def seeds(self) -> dict:
        return {name: sub_seed(self.seed, name)
                for name in ("stream", "data", "init", "pretrain", "adapt", "projection")}

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# dict <-> dataclass
# --------------------------------------------------------------------------

def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, where):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigurationError(f"{where}: may not be null")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def from_dict(cls, data, where: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    prefix = f"{where}." if where else ""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{prefix}{unknown[0]}: unknown key (allowed: {sorted(names)})")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        if where and not str(exc).startswith(where):
            raise ConfigurationError(f"{where}: {exc}") from None
        raise


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def load_config_text(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
    return from_dict(ExperimentConfig, data or {})


def load_config(path) -> ExperimentConfig:
    return load_config_text(Path(path).read_text())


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)
