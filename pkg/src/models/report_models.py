"""
Report models for command outputs are defined in this module.
It includes the `EvalReport` model for per-event test scores,
`MedianPrediction` for one median event-time prediction, and
`ComparisonRow` for the cross-model table built by the `report` command.
`SimulationManifest` and `CheckpointHeader` describe the metadata written
next to simulated sequences and inside checkpoint files.
"""

from pydantic import BaseModel, Field
from typing import Dict, List, Optional, Tuple


class MedianPrediction(BaseModel):
    predicted_time: float
    converged: bool
    iterations: int


class EvalReport(BaseModel):
    model: str
    checkpoint: Optional[str] = None
    depth: int
    intervals: List[float]
    per_event_nll: List[float]
    mean_nll: float
    true_mean_nll: Optional[float] = None
    standardized_mean_nll: Optional[float] = None
    standardized_against: Optional[str] = None
    band_low: Optional[float] = None
    band_high: Optional[float] = None
    block_scores: List[float] = Field(default_factory=list)
    predictions: List[MedianPrediction] = Field(default_factory=list)
    abs_errors: List[Optional[float]] = Field(default_factory=list)
    mae: Optional[float] = None
    non_converged: int = 0
    config_hash: str = ""
    seed: int = 0


class ComparisonRow(BaseModel):
    model: str
    mean_nll: float
    standardized_mean_nll: Optional[float] = None
    band_low: Optional[float] = None
    band_high: Optional[float] = None
    mae: Optional[float] = None
    non_converged: int = 0


class ComparisonTable(BaseModel):
    rows: List[ComparisonRow]
    best_mae_model: Optional[str] = None
    runner_up_mae_model: Optional[str] = None
    mae_p_value: Optional[float] = None
    config_hash: str = ""
    seed: int = 0


class SimulationManifest(BaseModel):
    process: Dict
    seed: int
    sequence_seeds: List[int]
    counts: List[int]
    files: List[str]
    config_hash: str


class CheckpointHeader(BaseModel):
    kind: str
    hyperparameters: Dict
    parameters: List[Tuple[str, List[int]]]
    depth: int
    epochs: int
    validation_nll: Optional[float] = None
    config_hash: str
    seed: int
