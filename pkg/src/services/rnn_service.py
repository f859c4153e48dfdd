"""
The `rnn_service` module encodes event history with a plain tanh recurrent
cell, h = tanh(W_h h_prev + W_x x + b_h). The cell is unrolled on a `Tape`
over the d most recent inputs of a window, starting from the zero state, so
gradients flow through every step (truncated backpropagation through time).
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from src.models.sequence_models import InputFeature, TrainingWindow
from src.services.autodiff_service import Tape
from src.utils.config import RNN_UNITS
from src.utils.errors import ContractError

PREFIX = "rnn."


@dataclass
class RnnParams:
    W_h: np.ndarray
    W_x: np.ndarray
    b_h: np.ndarray

    @property
    def units(self) -> int:
        return self.b_h.shape[0]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {PREFIX + "W_h": self.W_h, PREFIX + "W_x": self.W_x, PREFIX + "b_h": self.b_h}

    @classmethod
    def from_dict(cls, params: Dict[str, np.ndarray]) -> "RnnParams":
        return cls(params[PREFIX + "W_h"], params[PREFIX + "W_x"], params[PREFIX + "b_h"])

    @classmethod
    def zeros(cls, units: int = RNN_UNITS) -> "RnnParams":
        return cls(np.zeros((units, units)), np.zeros((units, 1)), np.zeros(units))


@dataclass
class RnnState:
    h: np.ndarray


@dataclass
class RnnNodes:
    """Tape nodes of the cell parameters"""
    W_h: int
    W_x: int
    b_h: int
    units: int


class RnnService:
    def init_params(self, units: int, rng: np.random.Generator) -> RnnParams:
        """Uniform(-a, a) weights with a = 1/sqrt(units), zero bias"""
        a = 1.0 / math.sqrt(units)
        return RnnParams(
            W_h=rng.uniform(-a, a, size=(units, units)),
            W_x=rng.uniform(-a, a, size=(units, 1)),
            b_h=np.zeros(units),
        )

    def declare(self, tape: Tape, units: int) -> RnnNodes:
        return RnnNodes(
            W_h=tape.leaf(PREFIX + "W_h"),
            W_x=tape.leaf(PREFIX + "W_x"),
            b_h=tape.leaf(PREFIX + "b_h"),
            units=units,
        )

    def step(self, tape: Tape, nodes: RnnNodes, h_prev: int, x: int) -> int:
        """One cell update; `x` is a (..., 1) input node"""
        recurrent = tape.matvec(nodes.W_h, h_prev)
        driven = tape.matvec(nodes.W_x, x)
        return tape.tanh(tape.add(tape.add(recurrent, driven), nodes.b_h))

    def unroll(self, tape: Tape, nodes: RnnNodes, depth: int) -> int:
        """Append `depth` steps from the zero state; inputs are leaves x0..x{depth-1}, oldest first"""
        if depth <= 0:
            raise ContractError(f"Unroll depth must be positive, got {depth}")
        h = tape.constant(np.zeros((1, nodes.units)))
        for k in range(depth):
            h = self.step(tape, nodes, h, tape.leaf(f"x{k}"))
        return h

    def feed(self, inputs: np.ndarray, depth: int) -> Dict[str, np.ndarray]:
        """Leaf values for a (batch, depth) array of encoded inputs"""
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim != 2 or inputs.shape[1] != depth:
            raise ContractError(f"Expected inputs of shape (batch, {depth}), got {inputs.shape}")
        return {f"x{k}": inputs[:, k:k + 1] for k in range(depth)}

    def encoder(self, params: RnnParams, depth: int) -> "HistoryEncoder":
        return HistoryEncoder(self, params, depth)

    def step_state(self, params: RnnParams, h_prev: RnnState, x: InputFeature) -> RnnState:
        """Single update evaluated outside of training"""
        tape = Tape()
        nodes = self.declare(tape, params.units)
        h = self.step(tape, nodes, tape.constant(h_prev.h), tape.constant([x.x]))
        tape.assign(params.as_dict())
        tape.forward()
        return RnnState(h=tape.value(h))

    def unroll_window(self, params: RnnParams, window: TrainingWindow, depth: Optional[int] = None) -> RnnState:
        depth = depth or window.depth
        if window.depth != depth:
            raise ContractError(f"Window has {window.depth} inputs, expected {depth}")
        H = self.encoder(params, depth).encode(np.array([window.features]))
        return RnnState(h=H[0])


class HistoryEncoder:
    """Forward-only unrolled cell for a fixed depth"""

    def __init__(self, service: RnnService, params: RnnParams, depth: int):
        self.service = service
        self.depth = depth
        self.tape = Tape()
        nodes = service.declare(self.tape, params.units)
        self.output = service.unroll(self.tape, nodes, depth)
        self.tape.assign(params.as_dict())

    def encode(self, inputs: np.ndarray, chunk: int = 8192) -> np.ndarray:
        """Hidden states (N, units) for (N, depth) encoded inputs"""
        inputs = np.asarray(inputs, dtype=float)
        if len(inputs) == 0:
            return np.empty((0, self.tape.value(self.tape.leaves[PREFIX + "b_h"]).shape[0]))
        states: List[np.ndarray] = []
        for start in range(0, len(inputs), chunk):
            self.tape.assign(self.service.feed(inputs[start:start + chunk], self.depth))
            self.tape.forward()
            states.append(self.tape.value(self.output).copy())
        logger.debug(f"Encoded {len(inputs)} windows at depth {self.depth}")
        return np.concatenate(states)


rnn_service = RnnService()
