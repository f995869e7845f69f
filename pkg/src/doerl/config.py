"""Experiment configuration schema (JSON)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator

CONFIG_VERSION = "1.0"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeneratorSpec(_Strict):
    num_states: PositiveInt = 4
    num_actions: PositiveInt = 2
    horizon: PositiveInt = 3
    feature_dim: Optional[PositiveInt] = None  # linear mode only
    concentration: PositiveFloat = 1.0
    seed: Optional[int] = None  # None: derive the instance from each run seed


class EnvironmentSpec(_Strict):
    generator: Optional[GeneratorSpec] = None
    file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.generator is None) == (self.file is None):
            raise ValueError("environment needs exactly one of 'generator' or 'file'")
        return self


class ModelClassSpec(_Strict):
    size: PositiveInt = 8
    perturbation: float = Field(0.1, gt=0.0, le=1.0)
    realizable: bool = True
    seed: Optional[int] = None  # None: derive from each run seed


class ScheduleSpec(_Strict):
    known_T: Optional[PositiveInt] = None
    doubling: Optional[PositiveInt] = None

    @model_validator(mode="after")
    def _one_kind(self):
        if (self.known_T is None) == (self.doubling is None):
            raise ValueError("schedule needs exactly one of 'known_T' or 'doubling'")
        return self

    @property
    def rounds(self) -> int:
        return self.known_T if self.known_T is not None else self.doubling


class KnobSpec(_Strict):
    c_beta: PositiveFloat = 1.0
    c_eta: PositiveFloat = 1.0
    c_zeta: PositiveFloat = 1.0


class SolverSpec(_Strict):
    max_iters: PositiveInt = 200
    restarts: int = Field(2, ge=0)
    stationarity_tol: PositiveFloat = 1e-7
    seed: int = 0


class BaselineSpec(_Strict):
    epsilon: float = Field(0.1, ge=0.0, le=1.0)


class ExperimentConfig(_Strict):
    version: str = CONFIG_VERSION
    mode: Literal["tabular", "linear", "baseline"]
    environment: EnvironmentSpec
    model_class: ModelClassSpec = ModelClassSpec()
    schedule: ScheduleSpec
    delta: float = Field(0.05, gt=0.0, lt=0.5)
    c_est: PositiveFloat = 1.0
    knobs: KnobSpec = KnobSpec()
    solver: SolverSpec = SolverSpec()
    baseline: BaselineSpec = BaselineSpec()
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs"

    @field_validator("version")
    @classmethod
    def _major(cls, v: str) -> str:
        if v.split(".")[0] != CONFIG_VERSION.split(".")[0]:
            raise ValueError(f"unsupported config version {v!r} (expected major {CONFIG_VERSION.split('.')[0]})")
        return v

    @model_validator(mode="after")
    def _mode_fields(self):
        gen = self.environment.generator
        if self.mode == "linear" and gen is not None and gen.feature_dim is None:
            raise ValueError("linear mode with a generated environment needs generator.feature_dim")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self


class ConfigError(ValueError):
    """The configuration file is unreadable or fails schema validation."""


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(doc)
    except ValueError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc


def resolve_path(config_path: str | Path, ref: str) -> Path:
    """Resolve a file reference relative to the config file's directory."""
    p = Path(ref)
    return p if p.is_absolute() else Path(config_path).parent / p
