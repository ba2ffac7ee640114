"""Experiment configuration: one JSON document with data/model/loss/train sections.

Parsing is strict: unknown keys and ill-typed values raise
:class:`ConfigurationError` naming the offending key path.
"""
from __future__ import annotations

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .arch import StudentConfig, TeacherConfig, student_arch, teacher_arch
from .data import LayoutDescriptor, SplitPlan
from .engine import TrainConfig
from .errors import ConfigurationError, StructuralError
from .losses import LossWeights, preset

DATA_ROOT_ENV = "DJKD_DATA_ROOT"
LAYOUTS = ("busi", "dataset_b")


@dataclass
class SyntheticConfig:
    n_per_class: int = 40
    seed_offset: int = 0


@dataclass
class DataConfig:
    root: str | None = None
    layout: str = "busi"
    layout_descriptor: dict | None = None
    resolution: int = 512
    train_fraction: float = 0.8
    include_normal: bool = False
    augment: bool = True
    synthetic: SyntheticConfig | None = None

    def descriptor(self) -> LayoutDescriptor:
        return LayoutDescriptor(**(self.layout_descriptor or {}))


@dataclass
class ModelConfig:
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)


@dataclass
class LossConfig:
    preset: str = "double_teacher"
    weights: list[float] | None = None  # overrides the preset when given
    temperature: float = 1.0

    def loss_weights(self) -> LossWeights:
        if self.weights is not None:
            if len(self.weights) != 3 or not all(isinstance(w, (int, float)) for w in self.weights):
                raise ConfigurationError("loss.weights must be [hard, benign, malignant]")
            return LossWeights(*map(float, self.weights))
        return preset(self.preset)


@dataclass
class TrainSection:
    teacher: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    seed: int = 42
    output_dir: str = "runs/experiment"

    def validate(self) -> "ExperimentConfig":
        d = self.data
        if d.layout not in LAYOUTS:
            raise ConfigurationError(f"data.layout must be one of {LAYOUTS}")
        if not 0 < d.train_fraction < 1:
            raise ConfigurationError("data.train_fraction must be in (0, 1)")
        if d.root is None and d.synthetic is None:
            raise ConfigurationError("data.root is unset and no data.synthetic section is given")
        for name, build, cfg in (("teacher", teacher_arch, self.model.teacher),
                                 ("student", student_arch, self.model.student)):
            try:
                spec = build(cfg)
            except (ConfigurationError, StructuralError, TypeError) as exc:
                raise ConfigurationError(f"model.{name}: {exc}") from None
            if d.resolution % spec.divisor:
                raise ConfigurationError(
                    f"data.resolution {d.resolution} is not divisible by {spec.divisor} ({name})")
        self.loss.loss_weights()
        if not self.loss.temperature > 0:
            raise ConfigurationError("loss.temperature must be positive")
        return self

    def plan(self, train: str = "all", test: str = "all") -> SplitPlan:
        return SplitPlan.named(train, test, self.data.train_fraction, self.seed)

    def stage(self, name: str, offset: int = 0) -> TrainConfig:
        """Per-stage training config with the experiment seed (plus ``offset``) applied."""
        base = getattr(self.train, name)
        kw = asdict(base)
        kw["seed"] = self.seed + offset
        kw["augment"] = self.data.augment
        kw["temperature"] = self.loss.temperature
        return TrainConfig(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        sub = _NESTED.get((cls, name))
        if sub is not None and value is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}")
        else:
            _check_type(value, default, f"{path}.{name}")
            kwargs[name] = tuple(value) if isinstance(default, tuple) else value
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _check_type(value: Any, default: Any, path: str) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigurationError(f"{path}: expected {type(default).__name__}, got {value!r}")


_NESTED = {
    (DataConfig, "synthetic"): SyntheticConfig,
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "loss"): LossConfig,
    (ExperimentConfig, "train"): TrainSection,
    (ModelConfig, "teacher"): TeacherConfig,
    (ModelConfig, "student"): StudentConfig,
    (TrainSection, "teacher"): TrainConfig,
    (TrainSection, "student"): TrainConfig,
}


def config_from_dict(raw: dict, source: str = "config") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, source)
    if cfg.data.root is None and os.environ.get(DATA_ROOT_ENV) and cfg.data.synthetic is None:
        cfg.data.root = os.environ[DATA_ROOT_ENV]
    try:
        return cfg.validate()
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw, str(path))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
