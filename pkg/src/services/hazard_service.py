"""
The `hazard_service` module implements the four hazard families that turn
an encoded history h into a distribution over the next inter-event interval
tau. Each family builds, on a `Tape`, the cumulative hazard Phi(tau | h) and
the log-hazard log phi(tau | h), whose difference is the per-event negative
log-likelihood:

- `ConstantHazard`: phi = exp(v.h + b).
- `ExponentialHazard`: phi = exp(w tau + v.h + b).
- `PiecewiseHazard`: phi = softplus(v_j.h + b_j) on bin j of width l.
- `CumulativeHazardNetwork`: Phi is a feedforward network monotone in tau and
  phi is its derivative, appended with `derivative_subgraph`.

`HazardEvaluator` compiles a forward-only tape with h as an input, used for
scoring and median root-finding once a model is trained.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from src.services.autodiff_service import Block, Layer, LayeredNetwork, Tape, build_layered, derivative_subgraph
from src.utils.config import HIDDEN_LAYERS, HIDDEN_UNITS, INPUT_EPSILON, PIECEWISE_BINS, POSITIVE_FLOOR, RNN_UNITS
from src.utils.errors import ContractError, NonFiniteError

PREFIX = "hazard."
LOG_TWO = math.log(2.0)


@dataclass
class HazardNodes:
    cumulative: int
    log_hazard: int


def _uniform(rng: np.random.Generator, fan_in: int, size) -> np.ndarray:
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=size)


def _as_tau(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float).reshape(-1, 1)
    if np.any(tau < 0) or not np.all(np.isfinite(tau)):
        raise ContractError("Intervals must be finite and non-negative")
    return tau


class HazardModel(ABC):
    """Contract shared by the hazard families"""

    kind: str = ""
    constrained: Tuple[str, ...] = ()

    def __init__(self, rnn_units: int = RNN_UNITS):
        self.rnn_units = rnn_units

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        ...

    @abstractmethod
    def build(self, tape: Tape, h: int) -> HazardNodes:
        """Append Phi and log phi for the data leaves this model declares"""

    @abstractmethod
    def feed(self, tau: np.ndarray) -> Dict[str, np.ndarray]:
        """Data leaf values for intervals `tau`"""

    def hyperparameters(self) -> Dict:
        return {"kind": self.kind, "rnn_units": self.rnn_units}

    def project(self, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Replace negative constrained weights by their absolute value"""
        for name in self.constrained:
            params[name] = np.maximum(np.abs(params[name]), POSITIVE_FLOOR)
        return params

    def closed_form_median(self, params: Dict[str, np.ndarray], h: np.ndarray) -> Optional[np.ndarray]:
        return None


class ConstantHazard(HazardModel):
    kind = "constant"

    def init_params(self, rng):
        return {
            PREFIX + "v": _uniform(rng, self.rnn_units, self.rnn_units),
            PREFIX + "b": np.zeros(()),
        }

    def build(self, tape, h):
        tau = tape.leaf("tau")
        c = tape.add(tape.dot(tape.leaf(PREFIX + "v"), h, keepdims=True), tape.leaf(PREFIX + "b"))
        return HazardNodes(cumulative=tape.mul(tau, tape.exp(c)), log_hazard=c)

    def feed(self, tau):
        return {"tau": _as_tau(tau)}

    def closed_form_median(self, params, h):
        c = np.atleast_2d(h) @ params[PREFIX + "v"] + params[PREFIX + "b"]
        return LOG_TWO * np.exp(-c)


class ExponentialHazard(HazardModel):
    kind = "exponential"

    def init_params(self, rng):
        return {
            PREFIX + "w": np.zeros(()),
            PREFIX + "v": _uniform(rng, self.rnn_units, self.rnn_units),
            PREFIX + "b": np.zeros(()),
        }

    def build(self, tape, h):
        tau = tape.leaf("tau")
        c = tape.add(tape.dot(tape.leaf(PREFIX + "v"), h, keepdims=True), tape.leaf(PREFIX + "b"))
        wt = tape.mul(tape.leaf(PREFIX + "w"), tau)
        # Phi = e^c (e^{w tau} - 1) / w = e^c tau exprel(w tau)
        cumulative = tape.mul(tape.mul(tau, tape.exprel(wt)), tape.exp(c))
        return HazardNodes(cumulative=cumulative, log_hazard=tape.add(wt, c))

    def feed(self, tau):
        return {"tau": _as_tau(tau)}

    def closed_form_median(self, params, h):
        w = float(params[PREFIX + "w"])
        c = np.atleast_2d(h) @ params[PREFIX + "v"] + params[PREFIX + "b"]
        target = LOG_TWO * np.exp(-c)
        if abs(w) < 1e-8:
            return target * (1.0 - w * target / 2.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            arg = w * target
            return np.where(arg > -1.0, np.log1p(arg) / w, np.nan)


class PiecewiseHazard(HazardModel):
    kind = "piecewise"

    def __init__(self, rnn_units: int = RNN_UNITS, bins: int = PIECEWISE_BINS, tau_max: float = 1.0):
        super().__init__(rnn_units)
        if tau_max <= 0:
            raise ContractError(f"tau_max must be positive, got {tau_max}")
        self.bins = bins
        self.tau_max = float(tau_max)
        self.width = self.tau_max / bins

    def hyperparameters(self):
        return {**super().hyperparameters(), "J": self.bins, "l": self.width, "tau_max": self.tau_max}

    def init_params(self, rng):
        return {
            PREFIX + "V": _uniform(rng, self.rnn_units, (self.bins, self.rnn_units)),
            PREFIX + "b": np.zeros(self.bins),
        }

    def build(self, tape, h):
        rates = tape.softplus(tape.add(tape.matvec(tape.leaf(PREFIX + "V"), h), tape.leaf(PREFIX + "b")))
        cumulative = tape.dot(rates, tape.leaf("bin_weights"), keepdims=True)
        current = tape.dot(rates, tape.leaf("bin_select"), keepdims=True)
        return HazardNodes(cumulative=cumulative, log_hazard=tape.log(current))

    def feed(self, tau):
        tau = _as_tau(tau)
        k = np.clip(np.ceil(tau / self.width), 1, self.bins).astype(int)
        j = np.arange(1, self.bins + 1)[None, :]
        weights = np.where(j < k, self.width, 0.0) + np.where(j == k, tau - (k - 1) * self.width, 0.0)
        select = (j == k).astype(float)
        return {"bin_weights": weights, "bin_select": select}


class CumulativeHazardNetwork(HazardModel):
    kind = "chfn"

    def __init__(self, rnn_units: int = RNN_UNITS, hidden_units: int = HIDDEN_UNITS, hidden_layers: int = HIDDEN_LAYERS):
        super().__init__(rnn_units)
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.constrained = (
            (PREFIX + "w_tau",)
            + tuple(f"{PREFIX}W{j}" for j in range(2, hidden_layers + 1))
            + (PREFIX + "w_out",)
        )

    def hyperparameters(self):
        return {**super().hyperparameters(), "hidden_layers": self.hidden_layers, "hidden_units": self.hidden_units}

    def init_params(self, rng):
        m = self.hidden_units
        params = {
            PREFIX + "w_tau": np.abs(_uniform(rng, self.rnn_units + 1, m)),
            PREFIX + "W_h": _uniform(rng, self.rnn_units + 1, (m, self.rnn_units)),
            PREFIX + "b1": np.zeros(m),
        }
        for j in range(2, self.hidden_layers + 1):
            params[f"{PREFIX}W{j}"] = np.abs(_uniform(rng, m, (m, m)))
            params[f"{PREFIX}b{j}"] = np.zeros(m)
        params[PREFIX + "w_out"] = np.abs(_uniform(rng, m, (1, m)))
        params[PREFIX + "b_out"] = np.zeros(1)
        return params

    def build(self, tape, h):
        # the tau slot receives u = log(tau + eps), so phi = (dZ/du) / (tau + eps)
        u = tape.leaf("log_tau")
        first = Layer(
            blocks=[Block(tape.leaf(PREFIX + "w_tau"), u, scalar=True), Block(tape.leaf(PREFIX + "W_h"), h)],
            bias=tape.leaf(PREFIX + "b1"),
            activation="tanh",
        )
        layers = build_layered(tape, [first]).layers
        for j in range(2, self.hidden_layers + 1):
            hidden = Layer(
                blocks=[Block(tape.leaf(f"{PREFIX}W{j}"), layers[-1].output)],
                bias=tape.leaf(f"{PREFIX}b{j}"),
                activation="tanh",
            )
            layers += build_layered(tape, [hidden]).layers
        head = Layer(
            blocks=[Block(tape.leaf(PREFIX + "w_out"), layers[-1].output)],
            bias=tape.leaf(PREFIX + "b_out"),
            activation="softplus",
        )
        net = LayeredNetwork(layers + build_layered(tape, [head]).layers)

        slope = derivative_subgraph(tape, net, input_index=0)
        return HazardNodes(cumulative=net.output, log_hazard=tape.sub(tape.log(slope), u))

    def feed(self, tau):
        return {"log_tau": np.log(_as_tau(tau) + INPUT_EPSILON)}


def create_hazard(
    kind: str,
    rnn_units: int = RNN_UNITS,
    hidden_units: int = HIDDEN_UNITS,
    hidden_layers: int = HIDDEN_LAYERS,
    bins: int = PIECEWISE_BINS,
    tau_max: float = 1.0,
) -> HazardModel:
    if kind == "constant":
        return ConstantHazard(rnn_units)
    if kind == "exponential":
        return ExponentialHazard(rnn_units)
    if kind == "piecewise":
        return PiecewiseHazard(rnn_units, bins=bins, tau_max=tau_max)
    if kind == "chfn":
        return CumulativeHazardNetwork(rnn_units, hidden_units=hidden_units, hidden_layers=hidden_layers)
    raise ContractError(f"Unknown hazard model kind {kind!r}")


def hazard_from_header(hyper: Dict) -> HazardModel:
    return create_hazard(
        hyper["kind"],
        rnn_units=hyper["rnn_units"],
        hidden_units=hyper.get("hidden_units", HIDDEN_UNITS),
        hidden_layers=hyper.get("hidden_layers", HIDDEN_LAYERS),
        bins=hyper.get("J", PIECEWISE_BINS),
        tau_max=hyper.get("tau_max", 1.0),
    )


class HazardEvaluator:
    """Forward-only tape of a hazard model with the history state as an input"""

    def __init__(self, model: HazardModel, params: Dict[str, np.ndarray]):
        self.model = model
        self.tape = Tape()
        h = self.tape.leaf("h")
        self.nodes = model.build(self.tape, h)
        self.tape.assign({k: v for k, v in params.items() if k.startswith(PREFIX)})

    def _run(self, tau, h, upto: Optional[int] = None) -> np.ndarray:
        tau = _as_tau(tau)
        h = np.atleast_2d(np.asarray(h, dtype=float))
        if len(h) != len(tau):
            h = np.broadcast_to(h, (len(tau), h.shape[-1]))
        self.tape.assign({"h": h, **self.model.feed(tau)})
        try:
            self.tape.forward(upto)
        except NonFiniteError as e:
            value = self.tape.nodes[e.index].value
            rows = np.argwhere(~np.isfinite(value)) if value is not None and value.ndim >= 2 else []
            row = int(rows[0][0]) if len(rows) else None
            logger.error(f"Non-finite {self.model.kind} hazard at row {row}")
            raise NonFiniteError(f"Non-finite {self.model.kind} hazard at event {row} ({e})", row) from e
        return tau

    def evaluate(self, tau, h) -> Tuple[np.ndarray, np.ndarray]:
        """Phi and log phi, one value per row of `h` (a single row broadcasts against `tau`)"""
        tau = self._run(tau, h)
        cumulative = np.broadcast_to(self.tape.value(self.nodes.cumulative), tau.shape).ravel()
        log_hazard = np.broadcast_to(self.tape.value(self.nodes.log_hazard), tau.shape).ravel()
        return cumulative.copy(), log_hazard.copy()

    def cumulative(self, tau, h) -> np.ndarray:
        """Phi only; the hazard nodes after it are not evaluated"""
        tau = self._run(tau, h, upto=self.nodes.cumulative)
        return np.broadcast_to(self.tape.value(self.nodes.cumulative), tau.shape).ravel().copy()


class HazardService:
    def evaluate(self, model: HazardModel, params, tau, h) -> Tuple[np.ndarray, np.ndarray]:
        return HazardEvaluator(model, params).evaluate(tau, h)

    def nll_term(self, model: HazardModel, params, tau, h) -> np.ndarray:
        """Phi(tau, h) - log phi(tau, h) for every row"""
        cumulative, log_hazard = self.evaluate(model, params, tau, h)
        return cumulative - log_hazard

    def constant_phi(self, params, tau, h):
        return self.evaluate(ConstantHazard(np.shape(h)[-1]), params, tau, h)

    def exponential_phi(self, params, tau, h):
        return self.evaluate(ExponentialHazard(np.shape(h)[-1]), params, tau, h)

    def piecewise_phi(self, params, tau, h, tau_max: float):
        bins = params[PREFIX + "b"].shape[0]
        return self.evaluate(PiecewiseHazard(np.shape(h)[-1], bins=bins, tau_max=tau_max), params, tau, h)

    def chfn_phi(self, params, tau, h):
        hidden_units = params[PREFIX + "b1"].shape[0]
        hidden_layers = 1 + sum(1 for k in params if k.startswith(PREFIX + "W") and k[len(PREFIX) + 1:].isdigit())
        model = CumulativeHazardNetwork(np.shape(h)[-1], hidden_units=hidden_units, hidden_layers=hidden_layers)
        return self.evaluate(model, params, tau, h)


hazard_service = HazardService()
