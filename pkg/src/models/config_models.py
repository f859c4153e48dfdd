"""
This module defines Pydantic models for run configuration. `ProcessSpec`
describes one synthetic generator, `TrainConfig` the maximum-likelihood
training setup, `EvalOptions` the scoring options, and the `*RunConfig`
models bundle them per command. Every model forbids unknown keys.
"""

import hashlib
import json
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.utils.config import (
    BATCH_SIZE,
    BLOCK_SIZE,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    DEPTH_GRID,
    GRADIENT_CLIP_NORM,
    HIDDEN_LAYERS,
    HIDDEN_UNITS,
    LEARNING_RATE,
    PERMUTATION_RESAMPLES,
    PIECEWISE_BINS,
    RNN_UNITS,
)
from src.utils.errors import ConfigError, StabilityError

ProcessKind = Literal["s_poisson", "n_poisson", "s_renewal", "n_renewal", "self_correcting", "hawkes"]
ModelKind = Literal["constant", "exponential", "piecewise", "chfn"]

# run-config keys left out of the config hash
EXECUTION_KEYS = {"threads", "out"}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProcessSpec(StrictModel):
    kind: ProcessKind
    name: Optional[str] = Field(None, description="Preset name, when built from one")
    rate: float = Field(1.0, gt=0, description="S-Poisson rate")
    trend_amplitude: float = Field(0.99, ge=0, lt=1, description="Sine trend amplitude")
    trend_period: float = Field(20000.0, gt=0, description="Sine trend period")
    mean: float = Field(1.0, gt=0, description="Renewal gap mean")
    std: float = Field(6.0, ge=0, description="Renewal gap standard deviation")
    mu: float = Field(0.2, gt=0, description="Hawkes background rate")
    alpha: Tuple[float, ...] = Field((0.8,), description="Hawkes branching weights")
    beta: Tuple[float, ...] = Field((1.0,), description="Hawkes decay rates")

    @model_validator(mode="after")
    def check_hawkes(self):
        if self.kind != "hawkes":
            return self
        if len(self.alpha) != len(self.beta) or not self.alpha:
            raise ValueError("alpha and beta must be non-empty and of equal length")
        if any(a < 0 for a in self.alpha) or any(b <= 0 for b in self.beta):
            raise ValueError("alpha must be non-negative and beta positive")
        if sum(self.alpha) >= 1.0:
            raise StabilityError(f"Hawkes branching ratio {sum(self.alpha):.4f} must be below 1")
        return self

    @property
    def lambda_max(self) -> float:
        return 1.0 + self.trend_amplitude


class TrainConfig(StrictModel):
    learning_rate: float = Field(LEARNING_RATE, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    adam_epsilon: float = Field(1e-8, gt=0)
    batch_size: int = Field(BATCH_SIZE, gt=0)
    depth_grid: Tuple[int, ...] = Field(DEPTH_GRID)
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    max_epochs: int = Field(100, gt=0)
    patience: int = Field(5, gt=0)
    clip_norm: float = Field(GRADIENT_CLIP_NORM, gt=0)
    rnn_units: int = Field(RNN_UNITS, gt=0)
    hidden_units: int = Field(HIDDEN_UNITS, gt=0)
    hidden_layers: int = Field(HIDDEN_LAYERS, gt=0)
    bins: int = Field(PIECEWISE_BINS, gt=0)
    seed: int = Field(DEFAULT_SEED, ge=0)

    @field_validator("depth_grid")
    @classmethod
    def check_depths(cls, value):
        if not value or any(d <= 0 for d in value):
            raise ValueError("depth_grid must hold positive integers")
        return tuple(value)


class EvalOptions(StrictModel):
    block_size: int = Field(BLOCK_SIZE, gt=0)
    carry_history: bool = True
    permutation_resamples: int = Field(PERMUTATION_RESAMPLES, gt=0)
    intensity_intervals: int = Field(50, gt=0)
    intensity_points: int = Field(20, gt=1)


class SimulateRunConfig(StrictModel):
    process: ProcessSpec
    n: int = Field(100_000, ge=0)
    sequences: int = Field(1, gt=0)
    seed: int = Field(DEFAULT_SEED, ge=0)
    threads: int = Field(DEFAULT_THREADS, gt=0)
    format: Literal["plain", "jsonl"] = "plain"
    out: str = "data"


class FitRunConfig(StrictModel):
    data: str
    format: Literal["plain", "jsonl"] = "plain"
    model: ModelKind
    train: TrainConfig = TrainConfig()
    train_fraction: float = Field(0.8, gt=0, lt=1)
    split_mode: Literal["events", "sequences"] = "events"
    seed: int = Field(DEFAULT_SEED, ge=0)
    threads: int = Field(DEFAULT_THREADS, gt=0)
    out: str = "runs"


class EvaluateRunConfig(StrictModel):
    data: str
    format: Literal["plain", "jsonl"] = "plain"
    checkpoints: List[str]
    true_spec: Optional[ProcessSpec] = None
    reference: Optional[str] = Field(None, description="Model kind to standardize against when no true spec exists")
    train_fraction: float = Field(0.8, gt=0, lt=1)
    split_mode: Literal["events", "sequences"] = "events"
    options: EvalOptions = EvalOptions()
    intensity_out: Optional[str] = Field(None, description="Directory for intensity-curve CSVs")
    seed: int = Field(DEFAULT_SEED, ge=0)
    threads: int = Field(DEFAULT_THREADS, gt=0)
    out: str = "reports"


class PredictRunConfig(StrictModel):
    data: str
    format: Literal["plain", "jsonl"] = "plain"
    checkpoint: str
    train_fraction: float = Field(0.8, gt=0, lt=1)
    split_mode: Literal["events", "sequences"] = "events"
    carry_history: bool = True
    seed: int = Field(DEFAULT_SEED, ge=0)
    threads: int = Field(DEFAULT_THREADS, gt=0)
    out: str = "predictions"


class ReportRunConfig(StrictModel):
    reports: List[str]
    reference: Optional[str] = Field(None, description="Model to standardize against when reports carry no true score")
    permutation_resamples: int = Field(PERMUTATION_RESAMPLES, gt=0)
    seed: int = Field(DEFAULT_SEED, ge=0)
    out: str = "reports"


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the key-sorted JSON dump of `config`, without keys that cannot change results"""
    values = config.model_dump(mode="json", exclude=EXECUTION_KEYS)
    payload = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_config(model_cls, values: dict):
    """Validate `values` into `model_cls`, turning pydantic failures into ConfigError"""
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
