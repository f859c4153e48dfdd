"""
The `training_service` module fits a recurrent hazard model by maximum
likelihood. A `TrainingModel` compiles one tape per truncation depth: the
unrolled RNN feeds the hazard model, and the loss is the summed per-window
NLL Phi - log phi. One reverse pass yields every parameter gradient (for the
cumulative hazard network this differentiates through its derivative
subgraph). `AdamOptimizer` applies bias-corrected updates followed by the
positive-weight projection, and `TrainingService.fit` runs the depth grid
with early stopping on a chronological validation tail.

Checkpoints are written in a fixed binary layout:

    b"NNPPCKPT" | u32 version | u32 header length | JSON header | float64 arrays

All integers and floats are little-endian and the arrays follow the header's
parameter order, so identical runs produce identical files.
"""

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.models.config_models import TrainConfig
from src.models.report_models import CheckpointHeader
from src.models.sequence_models import EventSequence, TrainingWindow
from src.services.autodiff_service import Tape
from src.services.hazard_service import HazardModel, create_hazard, hazard_from_header
from src.services.rnn_service import RnnParams, rnn_service
from src.services.sequence_service import sequence_service
from src.utils.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from src.utils.errors import CheckpointError, ContractError, NonFiniteError, TrainingError
from src.utils.random_utils import derive_rng, make_rng

Params = Dict[str, np.ndarray]

HISTORY_COLUMNS = ("d", "epoch", "train_nll", "val_nll", "clipped_batches")


class TrainingModel:
    """RNN encoder and hazard model compiled on one tape for a fixed depth"""

    def __init__(self, hazard: HazardModel, depth: int):
        self.hazard = hazard
        self.depth = depth
        self.tape = Tape()
        nodes = rnn_service.declare(self.tape, hazard.rnn_units)
        h = rnn_service.unroll(self.tape, nodes, depth)
        hazard_nodes = hazard.build(self.tape, h)
        self.window_nll = self.tape.sub(hazard_nodes.cumulative, hazard_nodes.log_hazard)
        self.loss = self.tape.sum(self.window_nll)

    def init_params(self, rng: np.random.Generator) -> Params:
        params = rnn_service.init_params(self.hazard.rnn_units, rng).as_dict()
        params.update(self.hazard.init_params(rng))
        return params

    def _run(self, params: Params, inputs: np.ndarray, targets: np.ndarray):
        self.tape.assign(params)
        self.tape.assign(rnn_service.feed(inputs, self.depth))
        self.tape.assign(self.hazard.feed(targets))
        try:
            self.tape.forward()
        except NonFiniteError as e:
            value = self.tape.nodes[e.index].value
            window = None
            if value is not None and value.ndim >= 2 and value.shape[0] == len(targets):
                rows = np.argwhere(~np.isfinite(value))
                window = int(rows[0][0]) if len(rows) else None
            raise NonFiniteError(f"Non-finite loss in window {window} ({e})", window) from e

    def per_window_nll(self, params: Params, inputs: np.ndarray, targets: np.ndarray, chunk: int = 4096) -> np.ndarray:
        out = []
        for start in range(0, len(targets), chunk):
            self._run(params, inputs[start:start + chunk], targets[start:start + chunk])
            out.append(self.tape.value(self.window_nll).ravel().copy())
        return np.concatenate(out) if out else np.empty(0)

    def mean_nll(self, params: Params, inputs: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean(self.per_window_nll(params, inputs, targets)))

    def loss_and_grads(self, params: Params, inputs: np.ndarray, targets: np.ndarray) -> Tuple[float, Params]:
        """Mean NLL over the batch and its gradient for every parameter"""
        if not len(targets):
            raise ContractError("Empty batch")
        self._run(params, inputs, targets)
        grads = self.tape.backward(self.loss)
        scale = 1.0 / len(targets)
        loss = float(self.tape.value(self.loss)) * scale
        return loss, {name: grads[name] * scale for name in params}


class AdamOptimizer:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamOptimizer":
        return cls(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon)

    def step(self, params: Params, grads: Params, hazard: Optional[HazardModel] = None) -> Params:
        """Bias-corrected update in place, then projection of the hazard's constrained weights"""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[k] / bc2) + self.epsilon
            params[k] = params[k] - step_size * self.m[k] / denom

        if hazard is not None:
            hazard.project(params)
        return params


def clip_gradients(grads: Params, max_norm: float) -> Tuple[Params, bool]:
    """Rescale to a global L2 norm of at most `max_norm`"""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads, False
    logger.debug(f"Clipping gradient of norm {norm:.3f} to {max_norm}")
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, True


@dataclass
class Checkpoint:
    kind: str
    hyperparameters: Dict
    depth: int
    params: Params
    epochs: int = 0
    validation_nll: float = float("nan")
    config_hash: str = ""
    seed: int = 0

    def hazard(self) -> HazardModel:
        return hazard_from_header(self.hyperparameters)

    def rnn_params(self) -> RnnParams:
        return RnnParams.from_dict(self.params)

    def header(self) -> CheckpointHeader:
        names = sorted(self.params)
        return CheckpointHeader(
            kind=self.kind,
            hyperparameters=self.hyperparameters,
            parameters=[(name, list(np.shape(self.params[name]))) for name in names],
            depth=self.depth,
            epochs=self.epochs,
            validation_nll=None if math.isnan(self.validation_nll) else self.validation_nll,
            config_hash=self.config_hash,
            seed=self.seed,
        )

    def to_bytes(self) -> bytes:
        header = self.header()
        payload = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(payload)), payload]
        for name, _ in header.parameters:
            parts.append(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        prefix = len(CHECKPOINT_MAGIC)
        if data[:prefix] != CHECKPOINT_MAGIC:
            raise CheckpointError("Not a checkpoint file (bad magic)")
        try:
            version, length = struct.unpack("<II", data[prefix:prefix + 8])
        except struct.error as e:
            raise CheckpointError("Truncated checkpoint header") from e
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")

        offset = prefix + 8
        try:
            header = CheckpointHeader.model_validate(json.loads(data[offset:offset + length].decode("utf-8")))
        except (ValueError, UnicodeDecodeError) as e:
            raise CheckpointError(f"Corrupt checkpoint header: {e}") from e
        offset += length

        params = {}
        for name, shape in header.parameters:
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise CheckpointError(f"Checkpoint truncated in parameter {name!r}")
            params[name] = np.frombuffer(data[offset:end], dtype="<f8").astype(float).reshape(shape)
            offset = end
        if offset != len(data):
            raise CheckpointError(f"{len(data) - offset} trailing bytes after checkpoint parameters")

        return cls(
            kind=header.kind,
            hyperparameters=header.hyperparameters,
            depth=header.depth,
            params=params,
            epochs=header.epochs,
            validation_nll=float("nan") if header.validation_nll is None else header.validation_nll,
            config_hash=header.config_hash,
            seed=header.seed,
        )

    def save(self, path: str) -> str:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        logger.info(f"Saved {self.kind} checkpoint (d={self.depth}) to {path}")
        return path

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass
class DepthResult:
    depth: int
    validation_nll: float
    epochs: int
    params: Params


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: List[Tuple] = field(default_factory=list)
    depth_scores: Dict[int, float] = field(default_factory=dict)


def _train_depth_task(job) -> Tuple[DepthResult, List[Tuple]]:
    history: List[Tuple] = []
    result = training_service.train_depth(*job, history=history)
    return result, history


class TrainingService:
    def batch_loss(self, model: TrainingModel, params: Params, batch: Sequence[TrainingWindow]) -> Tuple[float, Params]:
        inputs, targets = sequence_service.stack_windows(batch)
        return model.loss_and_grads(params, inputs, targets)

    def adam_step(self, optimizer: AdamOptimizer, params: Params, grads: Params, hazard: Optional[HazardModel] = None) -> Params:
        return optimizer.step(params, grads, hazard)

    def validation_split(
        self,
        sequences: Sequence[EventSequence],
        depth: int,
        fraction: float,
    ) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
        """Chronological tail of every sequence's windows held out for validation"""
        train_parts, val_parts = [], []
        for seq in sequences:
            inputs, targets = sequence_service.window_arrays(seq, depth, quiet=True)
            count = len(targets)
            if count < 2:
                continue
            held = min(max(int(math.floor(count * fraction)), 1), count - 1)
            train_parts.append((inputs[:count - held], targets[:count - held]))
            val_parts.append((inputs[count - held:], targets[count - held:]))

        def stack(parts):
            if not parts:
                return np.empty((0, depth)), np.empty(0)
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

        return stack(train_parts), stack(val_parts)

    def train_depth(
        self,
        hazard: HazardModel,
        depth: int,
        train: Tuple[np.ndarray, np.ndarray],
        validation: Tuple[np.ndarray, np.ndarray],
        config: TrainConfig,
        history: Optional[List[Tuple]] = None,
    ) -> DepthResult:
        """Adam with early stopping; returns the parameters with the best validation NLL"""
        model = TrainingModel(hazard, depth)
        params = model.init_params(make_rng(config.seed))
        optimizer = AdamOptimizer.from_config(config)
        inputs, targets = train

        best = DepthResult(depth, model.mean_nll(params, *validation), 0, {k: v.copy() for k, v in params.items()})
        stale = 0
        epoch = 0
        for epoch in range(1, config.max_epochs + 1):
            order = derive_rng(config.seed, depth, epoch).permutation(len(targets))
            total, clipped = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                rows = order[start:start + config.batch_size]
                loss, grads = model.loss_and_grads(params, inputs[rows], targets[rows])
                grads, was_clipped = clip_gradients(grads, config.clip_norm)
                clipped += int(was_clipped)
                params = optimizer.step(params, grads, hazard)
                total += loss * len(rows)

            train_nll = total / len(order)
            val_nll = model.mean_nll(params, *validation)
            if history is not None:
                history.append((depth, epoch, train_nll, val_nll, clipped))
            logger.info(f"d={depth} epoch {epoch}: train NLL {train_nll:.5f}, validation NLL {val_nll:.5f}")
            if clipped:
                logger.warning(f"d={depth} epoch {epoch}: gradient clipping active in {clipped} batches")

            if val_nll < best.validation_nll:
                best = DepthResult(depth, val_nll, epoch, {k: v.copy() for k, v in params.items()})
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info(f"d={depth}: no improvement for {stale} epochs, stopping after epoch {epoch}")
                    break
        best.epochs = epoch
        return best

    def fit(
        self,
        sequences: Sequence[EventSequence],
        kind: str,
        config: TrainConfig,
        config_hash: str = "",
        threads: int = 1,
    ) -> FitResult:
        """
        Train one model per truncation depth and keep the best on validation NLL

        Args:
            sequences: Training sequences
            kind: Hazard model kind
            config: Training hyperparameters
            config_hash: Hash of the run config, stored in the checkpoint
            threads: Worker processes; candidate depths train in parallel when above 1

        Returns:
            FitResult: Checkpoint of the best depth, per-epoch history and per-depth scores
        """
        intervals = [seq.intervals() for seq in sequences if seq.n > 1]
        tau_max = float(max((np.max(t) for t in intervals if len(t)), default=0.0))
        hazard = create_hazard(
            kind,
            rnn_units=config.rnn_units,
            hidden_units=config.hidden_units,
            hidden_layers=config.hidden_layers,
            bins=config.bins,
            tau_max=tau_max if tau_max > 0 else 1.0,
        )

        jobs = []
        for depth in config.depth_grid:
            train, validation = self.validation_split(sequences, depth, config.validation_fraction)
            if not len(train[1]) or not len(validation[1]):
                logger.warning(f"No training windows at depth {depth}; skipping")
                continue
            logger.info(f"Training {kind} model at d={depth} on {len(train[1])} windows ({len(validation[1])} validation)")
            jobs.append((hazard, depth, train, validation, config))

        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as executor:
                outcomes = list(executor.map(_train_depth_task, jobs))
        else:
            outcomes = [_train_depth_task(job) for job in jobs]
        # map keeps depth-grid order, so history and ties match a serial run
        history: List[Tuple] = [row for _, rows in outcomes for row in rows]
        results: List[DepthResult] = [result for result, _ in outcomes]

        if not results:
            raise TrainingError(f"No depth in {list(config.depth_grid)} yields training windows")

        chosen = min(results, key=lambda r: r.validation_nll)
        logger.info(f"Chose d={chosen.depth} with validation NLL {chosen.validation_nll:.5f}")
        checkpoint = Checkpoint(
            kind=kind,
            hyperparameters=hazard.hyperparameters(),
            depth=chosen.depth,
            params=chosen.params,
            epochs=chosen.epochs,
            validation_nll=chosen.validation_nll,
            config_hash=config_hash,
            seed=config.seed,
        )
        return FitResult(checkpoint, history, {r.depth: r.validation_nll for r in results})


training_service = TrainingService()
