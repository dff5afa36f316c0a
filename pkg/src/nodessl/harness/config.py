"""Experiment configuration: nested YAML validated into dataclasses.

Unknown keys anywhere are rejected, as are values of the wrong kind.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from ..diffcore import ContractError
from ..odesolve import SolverConfig
from ..ssl import PretrainConfig
from ..synthdata import CohortConfig
from ..timehead import HEAD_KINDS

TASKS = ("variable_interval", "fixed_horizon")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class ModelConfig:
    head: str = "node"
    encoder_widths: tuple = (128, 64)
    projector_widths: tuple = (64, 32)
    field_widths: tuple = (64, 64)


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "variable_interval"
    horizon: float | None = None
    tol_years: float = 0.25
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    label_fraction: float = 1.0
    grad_mode: str = "adjoint"
    select_metric: str = "auc_mean"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    precision: str = "f64"
    output_dir: str = "runs/default"
    cohort_path: str | None = None
    cohort: CohortConfig = field(default_factory=CohortConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(pretrain={"epochs": 2}, seed=3)``: validated copy."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value
        return from_dict(data)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_SECTIONS = {
    "cohort": CohortConfig,
    "solver": SolverConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
}


def _coerce(cls, name: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    defaults = cls()
    values = {}
    for key, value in raw.items():
        default = getattr(defaults, key)
        if default is None:
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{name}.{key} must be a number or null")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            value = float(value)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and v > 0 for v in value):
                raise ConfigError(f"{name}.{key} must be a list of positive integers")
            value = tuple(value)
        values[key] = value
    try:
        return replace(defaults, **values)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        if key in _SECTIONS:
            values[key] = _coerce(_SECTIONS[key], key, value or {})
        elif key == "seed":
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("seed must be a non-negative integer")
            values[key] = value
        elif key == "precision":
            if value not in ("f32", "f64"):
                raise ConfigError("precision must be f32 or f64")
            values[key] = value
        elif key in ("output_dir", "cohort_path"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            values[key] = value
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.cohort.validate()
        cfg.pretrain.validate()
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model.head not in HEAD_KINDS:
        raise ConfigError(f"model.head must be one of {HEAD_KINDS}")
    ft = cfg.finetune
    if ft.task not in TASKS:
        raise ConfigError(f"finetune.task must be one of {TASKS}")
    if ft.task == "fixed_horizon" and ft.horizon not in (1, 2, 3, 1.0, 2.0, 3.0):
        raise ConfigError("fixed_horizon needs finetune.horizon in {1, 2, 3}")
    if not 0 < ft.label_fraction <= 1:
        raise ConfigError("finetune.label_fraction must lie in (0, 1]")
    if ft.epochs < 0 or ft.batch_size < 1 or ft.lr < 0 or ft.weight_decay < 0 or ft.tol_years < 0:
        raise ConfigError("invalid finetune hyperparameters")
    if ft.grad_mode not in ("adjoint", "backprop"):
        raise ConfigError("finetune.grad_mode must be adjoint or backprop")
    if ft.select_metric not in ("auc_mean", "auc1", "auc2", "auc3", "kappa"):
        raise ConfigError("unknown finetune.select_metric")
    if cfg.model.projector_widths[-1] < 1:
        raise ConfigError("latent dim must be positive")


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
