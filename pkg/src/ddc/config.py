"""Run configuration: a sectioned TOML file mapped onto dataclasses.

Every key has a default, so a config file only lists what it changes. The
effective configuration (defaults materialized) is written to
``config.snapshot`` at the start of a run and re-parses to the same bytes.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .distill import DistillConfig
from .reward import Thresholds


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherConfig:
    arch: str = "desk"
    arch_file: str = ""
    weights: str = ""
    reference: str = ""
    epochs: int = 30
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 128
    augment: bool = False


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    dataset: str = "cifar10"
    subset: str = "full"
    classes: list = field(default_factory=list)
    shuffle_seed: int = 0
    # keep only the first N shuffled training examples; 0 keeps all
    max_train_examples: int = 0


@dataclass(frozen=True)
class PolicyConfig:
    hidden_width: int = 64
    learning_rate: float = 0.001
    momentum: float = 0.9
    head_bias: float = 2.0
    baseline_decay: float = 0.9
    baseline_update_before: bool = False


@dataclass(frozen=True)
class LatencyConfig:
    warmup: int = 10
    samples: int = 50
    batch_size: int = 1
    device: str = "cpu"


@dataclass(frozen=True)
class TransferConfig:
    iterations: int = 20
    source: str = ""


@dataclass(frozen=True)
class PruneConfig:
    iterations: int = 5
    filters_per_iteration: int = 512
    finetune_epochs: int = 10
    ranking_examples: int = 1024
    stage2_filters: int = 0


@dataclass(frozen=True)
class CompressionRunConfig:
    name: str = "ddc"
    seed: int = 0
    run_dir: str = "runs/ddc"
    iterations: int = 100
    students_per_iteration: int = 5
    student_epochs: int = 20
    parallel_workers: int = 1
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    data: DataConfig = field(default_factory=DataConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    distill: DistillConfig = field(default_factory=DistillConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)

    def __post_init__(self):
        for name in ("iterations", "students_per_iteration", "student_epochs", "parallel_workers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"run.{name} must be >= 0")
        if self.parallel_workers < 1:
            raise ConfigError("run.parallel_workers must be >= 1")

    @property
    def student_distill(self) -> DistillConfig:
        return replace(self.distill, epochs=self.student_epochs)


# section name in the file -> attribute on CompressionRunConfig
SECTIONS = {
    "teacher": ("teacher", TeacherConfig),
    "data": ("data", DataConfig),
    "reward": ("thresholds", Thresholds),
    "distill": ("distill", DistillConfig),
    "policy": ("policy", PolicyConfig),
    "latency": ("latency", LatencyConfig),
    "transfer": ("transfer", TransferConfig),
    "prune": ("prune", PruneConfig),
}
RUN_KEYS = ("name", "seed", "run_dir", "iterations", "students_per_iteration", "student_epochs",
            "parallel_workers")


def _coerce(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    out = {}
    for key, value in values.items():
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be true or false")
        elif isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        out[key] = value
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> CompressionRunConfig:
    unknown = sorted(set(data) - set(SECTIONS) - {"run"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    run = dict(data.get("run", {}))
    bad = sorted(set(run) - set(RUN_KEYS))
    if bad:
        raise ConfigError(f"unknown keys in [run]: {', '.join(bad)}")
    kwargs: dict[str, Any] = {}
    defaults = {f.name: f.default for f in fields(CompressionRunConfig) if f.name in RUN_KEYS}
    for key, value in run.items():
        if type(value) is not type(defaults[key]):
            raise ConfigError(f"run.{key} must be of type {type(defaults[key]).__name__}")
        kwargs[key] = value
    for section, (attr, cls) in SECTIONS.items():
        if section in data:
            kwargs[attr] = _coerce(cls, dict(data[section]), section)
    try:
        return CompressionRunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: CompressionRunConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"run": {k: getattr(cfg, k) for k in RUN_KEYS}}
    for section, (attr, _) in SECTIONS.items():
        out[section] = asdict(getattr(cfg, attr))
    return out


def load_config(path: str | Path | None) -> CompressionRunConfig:
    if path is None:
        return CompressionRunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dumps_config(cfg: CompressionRunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def loads_config(text: str) -> CompressionRunConfig:
    return config_from_dict(tomli.loads(text))


def with_overrides(cfg: CompressionRunConfig, **overrides: Any) -> CompressionRunConfig:
    """Apply dotted overrides such as ``{"distill.mode": "hard_only", "iterations": 0}``.

    ``None`` values are ignored so argparse namespaces can be passed through.
    """
    data = config_to_dict(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
        else:
            section, name = "run", key
        if section not in data or name not in data[section]:
            raise ConfigError(f"unknown config key {key}")
        data[section][name] = value
    return config_from_dict(data)


def resolve_data_root(cfg: CompressionRunConfig) -> str:
    root = cfg.data.root or os.environ.get("DDC_DATA_ROOT", "")
    if not root:
        raise ConfigError("no dataset root: set data.root or DDC_DATA_ROOT")
    return root
