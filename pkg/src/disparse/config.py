"""Experiment configuration: nested dataclasses <-> versioned YAML.

Every field is written out on save, so a run directory's ``config.yaml``
reproduces the run when fed back in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .arbiter import ARBITERS
from .engine import SCOPES
from .harness.data import SuiteSpec, TaskDef
from .saliency import ACCUMULATION

SCHEMA = "disparse.config/1"
PARADIGMS = ("dense", "static", "dynamic", "pretrained")

# Which mask-generation methods make sense for each paradigm.
PARADIGM_METHODS = {
    "dense": ("dense",),
    "static": ("disparse", "baseline-combined", "random"),
    "dynamic": ("disparse", "baseline-combined", "random"),
    "pretrained": ("disparse", "baseline-combined", "random", "magnitude"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    trunk_widths: list[int] = field(default_factory=lambda: [64, 64, 64, 64])
    head_hidden: int = 32
    activation: str = "relu"
    mask_biases: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 5000
    lr_decay: float = 0.5
    lr_decay_every: int = 1000


@dataclass
class ScheduleConfig:
    alpha: float = 0.3
    end_fraction: float = 0.75
    update_interval: int = 100
    grow_batches: int = 1


@dataclass
class SaliencyConfig:
    batches: int = 50
    accumulation: str = "signed"


@dataclass
class PretrainConfig:
    checkpoint: str | None = None
    finetune_iterations: int = 1000
    finetune_lr: float = 1e-4


@dataclass
class ExperimentConfig:
    paradigm: str = "static"
    method: str = "disparse"
    arbiter: str = "or"
    tie_keep: bool = True
    sparsity: float = 0.9
    scope: str = "global"
    calibrate: bool = True
    calibration_tol: float = 0.005
    seeds: list[int] = field(default_factory=lambda: [1])
    output_dir: str = "runs"
    log_every: int = 10
    watershed_threshold: float = 0.15
    suite: SuiteSpec = field(default_factory=SuiteSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    schema: str = SCHEMA

    def validate(self) -> "ExperimentConfig":
        if self.schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {self.schema!r} (expected {SCHEMA})")
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.method not in PARADIGM_METHODS[self.paradigm]:
            raise ConfigError(
                f"method {self.method!r} is not available for paradigm {self.paradigm!r}; "
                f"choose from {PARADIGM_METHODS[self.paradigm]}"
            )
        if self.arbiter not in ARBITERS:
            raise ConfigError(f"arbiter must be one of {ARBITERS}")
        if self.arbiter == "majority" and len(self.suite.tasks) < 3:
            raise ConfigError("majority vote needs at least 3 tasks")
        if not 0.0 < self.sparsity < 1.0:
            raise ConfigError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")
        if self.calibration_tol <= 0:
            raise ConfigError("calibration_tol must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.saliency.accumulation not in ACCUMULATION:
            raise ConfigError(f"saliency.accumulation must be one of {ACCUMULATION}")
        if self.saliency.batches < 1 or self.schedule.grow_batches < 1:
            raise ConfigError("saliency batch counts must be positive")
        if self.optim.iterations < 1 or self.optim.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.schedule.update_interval < 1:
            raise ConfigError("schedule.update_interval must be >= 1")
        if not 0.0 < self.schedule.end_fraction < 1.0:
            raise ConfigError("schedule.end_fraction must lie in (0, 1)")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=[seed])


def _build(cls, data: Any, where: str):
    if dataclasses.is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    nested = {
        "suite": SuiteSpec,
        "model": ModelConfig,
        "optim": OptimConfig,
        "schedule": ScheduleConfig,
        "saliency": SaliencyConfig,
        "pretrain": PretrainConfig,
    }
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in nested:
            kwargs[key] = _build(nested[key], value, f"{where}.{key}")
        elif cls is SuiteSpec and key == "tasks":
            kwargs[key] = [_build(TaskDef, t, f"{where}.tasks[{i}]") for i, t in enumerate(value)]
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(data or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config))
