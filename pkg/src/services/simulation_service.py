"""
The `simulation_service` module generates the synthetic benchmark processes
and scores sequences under their true conditional intensity.

Samplers:
- stationary Poisson (exponential gaps)
- non-stationary Poisson by thinning against a constant bound
- log-normal renewal
- gamma renewal warped through a time trend R(t) = int_0^t r(s) ds
- self-correcting process by exact inversion of its compensator
- Hawkes process with a sum-of-exponentials kernel by Ogata thinning

For every process the compensator increments Lambda(t_{i+1}) - Lambda(t_i)
and the log-intensity at each event are available in closed form; the true
per-event NLL is their difference, and the increments feed the
time-rescaling KS test.
"""

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import integrate, optimize, stats

from src.models.config_models import ProcessSpec
from src.models.sequence_models import EventSequence
from src.utils.config import TREND_TOLERANCE
from src.utils.errors import ContractError, ConvergenceError, NonFiniteError, SimulationError
from src.utils.random_utils import make_rng, split_seeds

PRESETS: Dict[str, Dict] = {
    "s_poisson": {"kind": "s_poisson", "rate": 1.0},
    "n_poisson": {"kind": "n_poisson", "trend_amplitude": 0.99, "trend_period": 20000.0},
    "s_renewal": {"kind": "s_renewal", "mean": 1.0, "std": 6.0},
    "n_renewal": {"kind": "n_renewal", "mean": 1.0, "std": 0.5, "trend_amplitude": 0.99, "trend_period": 20000.0},
    "self_correcting": {"kind": "self_correcting"},
    "hawkes1": {"kind": "hawkes", "mu": 0.2, "alpha": (0.8,), "beta": (1.0,)},
    "hawkes2": {"kind": "hawkes", "mu": 0.2, "alpha": (0.4, 0.4), "beta": (1.0, 20.0)},
}

THINNING_CHUNK = 4096


def preset(name: str) -> ProcessSpec:
    """ProcessSpec of a named synthetic benchmark process"""
    if name not in PRESETS:
        raise ContractError(f"Unknown process preset {name!r}; expected one of {sorted(PRESETS)}")
    return ProcessSpec(name=name, **PRESETS[name])


def resolve_process(value) -> Dict:
    """Preset name or bare kind to a process mapping; mappings pass through"""
    if isinstance(value, dict):
        return value
    if value in PRESETS:
        return {"name": value, **PRESETS[value]}
    return {"kind": value}


def _to_sequence(times: np.ndarray, t_start: float = 0.0) -> EventSequence:
    t_end = float(times[-1]) if len(times) else t_start
    return EventSequence(timestamps=tuple(times.tolist()), t_start=t_start, t_end=t_end)


def _previous_times(seq: EventSequence) -> Tuple[np.ndarray, np.ndarray]:
    times = seq.as_array()
    return times, np.concatenate([[seq.t_start], times[:-1]])


class SineTrend:
    """r(t) = a sin(2 pi t / P) + 1 with its exact integral"""

    def __init__(self, amplitude: float, period: float):
        self.amplitude = amplitude
        self.period = period
        self.omega = 2.0 * math.pi / period

    def rate(self, t):
        return self.amplitude * np.sin(self.omega * np.asarray(t, dtype=float)) + 1.0

    def integral(self, t):
        t = np.asarray(t, dtype=float)
        return t + self.amplitude / self.omega * (1.0 - np.cos(self.omega * t))

    @classmethod
    def from_spec(cls, spec: ProcessSpec) -> "SineTrend":
        return cls(spec.trend_amplitude, spec.trend_period)


def lognormal_parameters(mean: float, std: float) -> Tuple[float, float]:
    """Underlying normal (mu, sigma) of a log-normal with the given mean and std"""
    sigma2 = math.log1p((std / mean) ** 2)
    return math.log(mean) - sigma2 / 2.0, math.sqrt(sigma2)


def gamma_parameters(mean: float, std: float) -> Tuple[float, float]:
    """(shape, scale) of a gamma distribution with the given mean and std"""
    return (mean / std) ** 2, std * std / mean


def _lognormal(spec: ProcessSpec):
    mu, sigma = lognormal_parameters(spec.mean, spec.std)
    return stats.lognorm(s=sigma, scale=math.exp(mu))


def _gamma(spec: ProcessSpec):
    shape, scale = gamma_parameters(spec.mean, spec.std)
    return stats.gamma(a=shape, scale=scale)


def _gamma_gaps(rng: np.random.Generator, shape: float, scale: float, n: int) -> np.ndarray:
    k = int(round(shape))
    if abs(shape - k) < 1e-12 and 0 < k <= 64:
        # integral shape: sum of k exponential draws
        return rng.exponential(scale, size=(n, k)).sum(axis=1)
    return rng.gamma(shape, scale, size=n)


def invert_trend(
    integral: Callable,
    rate: Callable,
    targets: np.ndarray,
    tol: float = TREND_TOLERANCE,
) -> np.ndarray:
    """
    Solve R(t) = t' for every warped time t'

    Newton steps run on the whole array first; entries whose residual stays
    above tol * max(1, t') are re-solved by bracketed bisection.
    """
    targets = np.asarray(targets, dtype=float)
    if not len(targets):
        return targets.copy()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        roots = np.asarray(optimize.newton(
            lambda t: integral(t) - targets, targets.copy(), fprime=rate, tol=1e-13, maxiter=100, disp=False,
        ), dtype=float).reshape(targets.shape)

    bound = tol * np.maximum(1.0, np.abs(targets))
    failed = ~(np.isfinite(roots) & (np.abs(integral(roots) - targets) < bound))
    if np.any(failed):
        logger.debug(f"Falling back to bisection for {int(failed.sum())} trend inversions")
    for idx in np.flatnonzero(failed):
        target = targets[idx]
        hi = max(target, 1.0)
        while integral(hi) < target:
            hi *= 2.0
            if not math.isfinite(hi):
                raise ConvergenceError(f"No bracket for trend inversion of t'={target}")
        try:
            roots[idx] = optimize.brentq(lambda t: float(integral(t)) - target, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
        except (RuntimeError, ValueError) as e:
            raise ConvergenceError(f"Trend inversion failed for t'={target}: {e}") from e
        if abs(float(integral(roots[idx])) - target) >= bound[idx]:
            raise ConvergenceError(f"Trend inversion did not reach tolerance for t'={target}")
    return roots


def _simulate_kind(spec: ProcessSpec, n: int, seed: int) -> EventSequence:
    service = simulation_service
    if spec.kind == "s_poisson":
        return service.sim_poisson(spec.rate, n, seed)
    if spec.kind == "n_poisson":
        trend = SineTrend.from_spec(spec)
        return service.sim_nonstationary_poisson(trend.rate, spec.lambda_max, n, seed)
    if spec.kind == "s_renewal":
        return service.sim_renewal_lognormal(spec.mean, spec.std, n, seed)
    if spec.kind == "n_renewal":
        trend = SineTrend.from_spec(spec)
        return service.sim_nonstationary_renewal(spec.mean, spec.std, n, seed, trend.rate, trend.integral)
    if spec.kind == "self_correcting":
        return service.sim_self_correcting(n, seed)
    if spec.kind == "hawkes":
        return service.sim_hawkes(spec.mu, spec.alpha, spec.beta, n, seed)
    raise ContractError(f"Unknown process kind {spec.kind!r}")


def _simulate_task(args: Tuple[ProcessSpec, int, int]) -> EventSequence:
    return _simulate_kind(*args)


class SimulationService:
    def sim_poisson(self, rate: float, n: int, seed: int) -> EventSequence:
        if rate <= 0:
            raise ContractError(f"Poisson rate must be positive, got {rate}")
        rng = make_rng(seed)
        return _to_sequence(np.cumsum(rng.exponential(1.0 / rate, size=n)))

    def sim_nonstationary_poisson(
        self,
        rate: Callable,
        lambda_max: float,
        n: int,
        seed: int,
    ) -> EventSequence:
        """Thinning of a Poisson(lambda_max) proposal stream, accepted with probability rate(t) / lambda_max"""
        rng = make_rng(seed)
        accepted: List[np.ndarray] = []
        count = 0
        t = 0.0
        while count < n:
            proposals = t + np.cumsum(rng.exponential(1.0 / lambda_max, size=THINNING_CHUNK))
            rates = np.asarray(rate(proposals), dtype=float) * np.ones_like(proposals)
            if np.any(rates > lambda_max) or np.any(rates < 0):
                worst = float(rates.max())
                raise SimulationError(f"Rate {worst} exceeds the thinning bound {lambda_max}")
            keep = proposals[rng.uniform(size=THINNING_CHUNK) * lambda_max < rates]
            accepted.append(keep)
            count += len(keep)
            t = float(proposals[-1])
        times = np.concatenate(accepted)[:n] if accepted else np.empty(0)
        return _to_sequence(times)

    def sim_renewal_lognormal(self, mean: float, std: float, n: int, seed: int) -> EventSequence:
        if mean <= 0 or std < 0:
            raise ContractError(f"Log-normal renewal needs mean > 0 and std >= 0, got {mean}, {std}")
        rng = make_rng(seed)
        if std == 0:
            return _to_sequence(mean * np.arange(1, n + 1, dtype=float))
        mu, sigma = lognormal_parameters(mean, std)
        return _to_sequence(np.cumsum(rng.lognormal(mu, sigma, size=n)))

    def sim_nonstationary_renewal(
        self,
        mean: float,
        std: float,
        n: int,
        seed: int,
        rate: Optional[Callable] = None,
        integral: Optional[Callable] = None,
    ) -> EventSequence:
        """Gamma renewal in warped time t' = R(t), mapped back through R^-1"""
        if mean <= 0 or std <= 0:
            raise ContractError(f"Gamma renewal needs mean > 0 and std > 0, got {mean}, {std}")
        rng = make_rng(seed)
        shape, scale = gamma_parameters(mean, std)
        warped = np.cumsum(_gamma_gaps(rng, shape, scale, n))
        if rate is None:
            return _to_sequence(warped)
        if integral is None:
            integral = np.vectorize(lambda t: integrate.quad(rate, 0.0, t)[0])
        return _to_sequence(invert_trend(integral, rate, warped))

    def sim_self_correcting(self, n: int, seed: int) -> EventSequence:
        """
        Exact inversion of e^{-i} (e^t - e^{t_i}) = E with E ~ Exp(1)

        Computed as t = t_i + log1p(E e^{i - t_i}) to stay in range for long sequences.
        """
        rng = make_rng(seed)
        draws = rng.exponential(1.0, size=n)
        times = np.empty(n)
        t = 0.0
        for i in range(n):
            t = t + math.log1p(draws[i] * math.exp(i - t))
            times[i] = t
        return _to_sequence(times)

    def sim_hawkes(self, mu: float, alpha, beta, n: int, seed: int) -> EventSequence:
        """
        Ogata thinning for lambda(t) = mu + sum_j alpha_j beta_j sum_{t_i < t} exp(-beta_j (t - t_i))

        The kernel only decays between events, so the intensity at the
        current proposal time bounds every later time until the next event.
        """
        spec = ProcessSpec(kind="hawkes", mu=mu, alpha=tuple(alpha), beta=tuple(beta))
        a = np.asarray(spec.alpha, dtype=float)
        b = np.asarray(spec.beta, dtype=float)
        rng = make_rng(seed)

        times = np.empty(n)
        state = np.zeros_like(a)  # sum_i exp(-beta_j (s - t_i)) at the current time s
        s = 0.0
        count = 0
        proposals = 0
        while count < n:
            bound = mu + float(np.dot(a * b, state))
            w = rng.exponential(1.0 / bound)
            state = state * np.exp(-b * w)
            s += w
            proposals += 1
            if rng.uniform() * bound <= mu + float(np.dot(a * b, state)):
                times[count] = s
                count += 1
                state = state + 1.0
        logger.debug(f"Hawkes thinning accepted {n} of {proposals} proposals")
        return _to_sequence(times)

    def simulate(self, spec: ProcessSpec, n: int, seed: int) -> EventSequence:
        if n < 0:
            raise ContractError(f"Event count must be non-negative, got {n}")
        seq = _simulate_kind(spec, n, seed)
        logger.info(f"Simulated {seq.n} events of {spec.name or spec.kind} (seed {seed})")
        return seq

    def simulate_many(self, spec: ProcessSpec, n: int, sequences: int, seed: int, threads: int = 1) -> List[EventSequence]:
        """`sequences` independently seeded sequences, in seed order"""
        seeds = split_seeds(seed, sequences)
        tasks = [(spec, n, s) for s in seeds]
        if threads > 1 and sequences > 1:
            with ProcessPoolExecutor(max_workers=min(threads, sequences)) as executor:
                result = list(executor.map(_simulate_task, tasks))
        else:
            result = [_simulate_task(task) for task in tasks]
        logger.info(f"Simulated {sequences} sequences of {n} events of {spec.name or spec.kind}")
        return result

    # true-model scoring

    def event_terms(self, spec: ProcessSpec, seq: EventSequence) -> Tuple[np.ndarray, np.ndarray]:
        """Compensator increments and log-intensity at every event"""
        times, previous = _previous_times(seq)
        tau = times - previous
        index = np.arange(len(times), dtype=float)

        if spec.kind == "s_poisson":
            return spec.rate * tau, np.full(len(tau), math.log(spec.rate))
        if spec.kind == "n_poisson":
            trend = SineTrend.from_spec(spec)
            return trend.integral(times) - trend.integral(previous), np.log(trend.rate(times))
        if spec.kind == "s_renewal":
            if spec.std == 0:
                raise ContractError("Degenerate renewal process has no density")
            dist = _lognormal(spec)
            survival = dist.logsf(tau)
            return -survival, dist.logpdf(tau) - survival
        if spec.kind == "n_renewal":
            trend = SineTrend.from_spec(spec)
            warped = trend.integral(times) - trend.integral(previous)
            dist = _gamma(spec)
            survival = dist.logsf(warped)
            return -survival, dist.logpdf(warped) - survival + np.log(trend.rate(times))
        if spec.kind == "self_correcting":
            return np.exp(previous - index) * np.expm1(tau), times - index
        if spec.kind == "hawkes":
            a = np.asarray(spec.alpha, dtype=float)
            b = np.asarray(spec.beta, dtype=float)
            increments = np.empty(len(tau))
            log_rate = np.empty(len(tau))
            state = np.zeros_like(a)  # sum over past events, evaluated at the previous event
            for i, gap in enumerate(tau):
                decay = np.exp(-b * gap)
                increments[i] = spec.mu * gap + float(np.dot(a, state * -np.expm1(-b * gap)))
                log_rate[i] = math.log(spec.mu + float(np.dot(a * b, state * decay)))
                state = state * decay + 1.0
            return increments, log_rate
        raise ContractError(f"Unknown process kind {spec.kind!r}")

    def compensator_increments(self, spec: ProcessSpec, seq: EventSequence) -> np.ndarray:
        return self.event_terms(spec, seq)[0]

    def true_nll(self, spec: ProcessSpec, seq: EventSequence) -> np.ndarray:
        """Per-event -log p(t_{i+1} | past) under the generating process"""
        increments, log_rate = self.event_terms(spec, seq)
        scores = increments - log_rate
        if not np.all(np.isfinite(scores)):
            bad = int(np.flatnonzero(~np.isfinite(scores))[0])
            raise NonFiniteError(f"True NLL is not finite at event {bad}; does {spec.kind} match the data?", bad)
        return scores

    def true_intensity(self, spec: ProcessSpec, seq: EventSequence, query) -> np.ndarray:
        """lambda(t | H_t) at `query` times, where H_t holds the events strictly before t"""
        query = np.asarray(query, dtype=float)
        times = seq.as_array()
        count = np.searchsorted(times, query, side="left")
        last = np.where(count > 0, times[np.maximum(count - 1, 0)], seq.t_start)

        if spec.kind == "s_poisson":
            return np.full(query.shape, spec.rate)
        if spec.kind == "n_poisson":
            return SineTrend.from_spec(spec).rate(query)
        if spec.kind == "s_renewal":
            dist = _lognormal(spec)
            return np.exp(dist.logpdf(query - last) - dist.logsf(query - last))
        if spec.kind == "n_renewal":
            trend = SineTrend.from_spec(spec)
            warped = trend.integral(query) - trend.integral(last)
            dist = _gamma(spec)
            return trend.rate(query) * np.exp(dist.logpdf(warped) - dist.logsf(warped))
        if spec.kind == "self_correcting":
            return np.exp(query - count)
        if spec.kind == "hawkes":
            a = np.asarray(spec.alpha, dtype=float)
            b = np.asarray(spec.beta, dtype=float)
            result = np.full(query.shape, spec.mu)
            for q_idx, (t, k) in enumerate(zip(query.ravel(), count.ravel())):
                lags = t - times[:k]
                result.flat[q_idx] += float(np.sum(a[:, None] * b[:, None] * np.exp(-b[:, None] * lags[None, :])))
            return result
        raise ContractError(f"Unknown process kind {spec.kind!r}")

    def time_rescaling_test(self, spec: ProcessSpec, seq: EventSequence) -> Tuple[float, float]:
        """KS statistic and p-value of the compensator increments against Exp(1)"""
        result = stats.kstest(self.compensator_increments(spec, seq), "expon")
        logger.debug(f"Time-rescaling KS for {spec.name or spec.kind}: D={result.statistic:.4f}, p={result.pvalue:.4f}")
        return float(result.statistic), float(result.pvalue)


simulation_service = SimulationService()
