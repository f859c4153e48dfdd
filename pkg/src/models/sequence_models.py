"""
This module defines the Pydantic models for event data. `EventSequence`
holds the timestamps of one observed sequence together with its observation
window, `InputFeature` is the log-encoded inter-event interval fed to the
recurrent encoder, and `TrainingWindow` is one truncated history paired with
the interval that follows it.
"""

import math
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.utils.config import INPUT_EPSILON


class EventSequence(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamps: Tuple[float, ...] = Field(default=(), description="Event times, non-decreasing")
    t_start: float = Field(0.0, description="Start of the observation window")
    t_end: float = Field(0.0, description="End of the observation window")

    @model_validator(mode="after")
    def check_window(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ValueError("observation window bounds must be finite")
        if self.t_start > self.t_end:
            raise ValueError(f"t_start {self.t_start} exceeds t_end {self.t_end}")
        if not self.timestamps:
            return self
        times = np.asarray(self.timestamps, dtype=float)
        if not np.all(np.isfinite(times)):
            raise ValueError("timestamps must be finite")
        steps = np.diff(times)
        if steps.size and np.any(steps < 0):
            index = int(np.argmax(steps < 0)) + 1
            raise ValueError(f"timestamps non-monotone at index {index}")
        if times[0] < self.t_start or times[-1] > self.t_end:
            raise ValueError("timestamps fall outside [t_start, t_end]")
        return self

    @property
    def n(self) -> int:
        return len(self.timestamps)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.timestamps, dtype=float)

    def intervals(self) -> np.ndarray:
        """Gaps between consecutive events (n - 1 values)"""
        return np.diff(self.as_array())


class InputFeature(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float = Field(..., description="log(raw_interval + epsilon)")
    raw_interval: float = Field(..., ge=0.0)

    @classmethod
    def from_interval(cls, interval: float) -> "InputFeature":
        return cls(x=math.log(interval + INPUT_EPSILON), raw_interval=interval)


class TrainingWindow(BaseModel):
    model_config = ConfigDict(frozen=True)

    features: Tuple[float, ...] = Field(..., description="Encoded inputs, oldest first")
    intervals: Tuple[float, ...] = Field(..., description="Raw intervals behind `features`")
    target_interval: float = Field(..., ge=0.0)

    @property
    def depth(self) -> int:
        return len(self.features)

    @property
    def inputs(self) -> List[InputFeature]:
        return [
            InputFeature(x=x, raw_interval=tau)
            for x, tau in zip(self.features, self.intervals)
        ]
