"""
The `sequence_service` module turns event sequences into model inputs.
It encodes inter-event intervals as log(tau + eps), splits sequences into
training and test parts (per event or per sequence), and cuts a sequence
into truncated-history training windows of a fixed depth. Windows never
cross sequence boundaries.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view

from src.models.sequence_models import EventSequence, InputFeature, TrainingWindow
from src.utils.config import INPUT_EPSILON
from src.utils.errors import ContractError


def encode(intervals: np.ndarray) -> np.ndarray:
    """Log encoding of raw intervals"""
    return np.log(np.asarray(intervals, dtype=float) + INPUT_EPSILON)


def decode(features: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(features, dtype=float)) - INPUT_EPSILON


class SequenceService:
    def encode_intervals(self, seq: EventSequence) -> List[InputFeature]:
        """InputFeature for every gap of `seq`"""
        return [InputFeature.from_interval(float(tau)) for tau in seq.intervals()]

    def split_train_test(self, seq: EventSequence, train_frac: float) -> Tuple[EventSequence, EventSequence]:
        """Chronological split: the first floor(n * train_frac) events train, the rest test"""
        if not 0.0 < train_frac < 1.0:
            raise ContractError(f"train_frac must lie in (0, 1), got {train_frac}")
        if seq.n < 2:
            raise ContractError(f"Cannot split a sequence of {seq.n} events")

        k = int(math.floor(seq.n * train_frac))
        times = seq.timestamps
        split_time = times[k - 1] if k > 0 else seq.t_start
        train = EventSequence(timestamps=times[:k], t_start=seq.t_start, t_end=split_time)
        test = EventSequence(timestamps=times[k:], t_start=split_time, t_end=seq.t_end)
        logger.debug(f"Split {seq.n} events into {train.n} train / {test.n} test at t={split_time}")
        return train, test

    def split_dataset(
        self,
        sequences: Sequence[EventSequence],
        train_frac: float,
        mode: str = "events",
    ) -> Tuple[List[EventSequence], List[EventSequence]]:
        """
        Split a dataset for training and testing

        Args:
            sequences: The dataset
            train_frac: Fraction assigned to training
            mode: "events" splits every sequence chronologically;
                "sequences" keeps whole sequences on either side

        Returns:
            Tuple of training and test sequence lists, index-aligned in "events" mode
        """
        if mode == "events":
            pairs = [self.split_train_test(seq, train_frac) for seq in sequences]
            return [p[0] for p in pairs], [p[1] for p in pairs]
        if mode == "sequences":
            k = int(math.floor(len(sequences) * train_frac))
            if k == 0 or k == len(sequences):
                raise ContractError(f"Cannot split {len(sequences)} sequences with fraction {train_frac}")
            return list(sequences[:k]), list(sequences[k:])
        raise ContractError(f"Unknown split mode {mode!r}")

    def window_arrays(self, seq: EventSequence, d: int, quiet: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        Batch form of `make_windows`

        Returns:
            inputs: (n - d - 1, d) encoded intervals, oldest first
            targets: (n - d - 1,) interval that follows each window
        """
        if d <= 0:
            raise ContractError(f"Truncation depth must be positive, got {d}")
        if seq.n < d + 2:
            if not quiet:
                logger.warning(f"Sequence of {seq.n} events is too short for depth {d}; no windows")
            return np.empty((0, d)), np.empty(0)

        intervals = seq.intervals()
        features = encode(intervals)
        inputs = sliding_window_view(features[:-1], d)
        targets = intervals[d:]
        return np.ascontiguousarray(inputs), targets.copy()

    def make_windows(self, seq: EventSequence, d: int) -> List[TrainingWindow]:
        """Every window of depth `d` in `seq`, in chronological order"""
        inputs, targets = self.window_arrays(seq, d)
        if not len(targets):
            return []
        raw = sliding_window_view(seq.intervals()[:-1], d)
        return [
            TrainingWindow.model_construct(
                features=tuple(float(x) for x in row),
                intervals=tuple(float(t) for t in raw_row),
                target_interval=float(target),
            )
            for row, raw_row, target in zip(inputs, raw, targets)
        ]

    def stack_windows(self, windows: Sequence[TrainingWindow]) -> Tuple[np.ndarray, np.ndarray]:
        if not windows:
            raise ContractError("No windows to stack")
        depth = windows[0].depth
        if any(w.depth != depth for w in windows):
            raise ContractError("Windows of mixed depth cannot be stacked")
        inputs = np.array([w.features for w in windows], dtype=float)
        targets = np.array([w.target_interval for w in windows], dtype=float)
        return inputs, targets

    def dataset_windows(self, sequences: Sequence[EventSequence], d: int) -> Tuple[np.ndarray, np.ndarray]:
        """Windows of every sequence, concatenated in dataset order"""
        parts = [self.window_arrays(seq, d, quiet=True) for seq in sequences]
        parts = [p for p in parts if len(p[1])]
        if not parts:
            logger.warning(f"No sequence yields a window at depth {d}")
            return np.empty((0, d)), np.empty(0)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def with_history(
        self,
        history: Optional[EventSequence],
        test: EventSequence,
        d: int,
    ) -> Tuple[EventSequence, int]:
        """
        Prefix `test` with the last d + 1 events of `history`

        Returns the combined sequence and the number of test events that
        become scorable targets. With a long enough history every test event
        is scored; without one, the first d + 1 test events only feed the encoder.
        """
        if history is None or history.n == 0:
            return test, max(test.n - d - 1, 0)
        tail = history.timestamps[-(d + 1):]
        combined = EventSequence(
            timestamps=tuple(tail) + tuple(test.timestamps),
            t_start=history.t_start,
            t_end=test.t_end,
        )
        return combined, max(combined.n - d - 1, 0)


sequence_service = SequenceService()
