"""
The `evaluation_service` module scores trained checkpoints on test data.

- `score_nll` computes the per-event negative log-likelihood
  Phi(tau, h) - log phi(tau, h), with the RNN state of the first test events
  fed from the tail of the training sequence when history carry-over is on.
- `predict_median` solves Phi(tau, h) = log 2 by bracket doubling and
  bisection, vectorized over events. Bounded cumulative hazards that never
  reach log 2 are flagged as non-converged rather than imputed.
- Block bands, standardized scores, a paired sign-flip permutation test on
  absolute errors and the cross-model comparison table are built on top.
- `intensity_curve` reconstructs the model (and optionally the true)
  conditional intensity between consecutive test events.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.models.config_models import EvalOptions, ProcessSpec
from src.models.report_models import ComparisonRow, ComparisonTable, EvalReport, MedianPrediction
from src.models.sequence_models import EventSequence
from src.services.hazard_service import HazardEvaluator
from src.services.rnn_service import rnn_service
from src.services.sequence_service import sequence_service
from src.services.simulation_service import simulation_service
from src.services.training_service import Checkpoint
from src.utils.config import (
    BLOCK_SIZE,
    MEDIAN_BRACKET_CAP,
    MEDIAN_BRACKET_START,
    MEDIAN_TOLERANCE,
    PERMUTATION_RESAMPLES,
)
from src.utils.errors import ContractError
from src.utils.io_utils import write_csv, write_json
from src.utils.random_utils import make_rng

LOG_TWO = math.log(2.0)
MAX_BISECTIONS = 200
EVENT_COLUMNS = ("index", "tau", "nll", "predicted", "abs_error", "converged")
PREDICTION_COLUMNS = ("index", "t_last", "predicted_time", "converged", "iterations")


@dataclass
class ScoredEvents:
    """Per-event quantities of one test sequence, aligned by position"""
    intervals: np.ndarray
    last_times: np.ndarray
    states: np.ndarray
    nll: np.ndarray


@dataclass
class MedianBatch:
    predicted_time: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray

    def as_models(self) -> List[MedianPrediction]:
        return [
            MedianPrediction(predicted_time=float(t), converged=bool(c), iterations=int(k))
            for t, c, k in zip(self.predicted_time, self.converged, self.iterations)
        ]


def full_sequence(history: Optional[EventSequence], test: EventSequence) -> EventSequence:
    """Training and test parts joined back into the observed sequence"""
    if history is None or history.n == 0:
        return test
    return EventSequence(
        timestamps=tuple(history.timestamps) + tuple(test.timestamps),
        t_start=history.t_start,
        t_end=test.t_end,
    )


def _evaluate_task(job) -> EvalReport:
    return evaluation_service.evaluate(*job)


def _predict_task(job) -> List[Tuple[np.ndarray, MedianBatch]]:
    return list(evaluation_service.predict_stream(*job))


class EvaluationService:
    def prepare(
        self,
        checkpoint: Checkpoint,
        test: EventSequence,
        history: Optional[EventSequence] = None,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Encoded RNN states, target intervals and last event times of every scorable test event"""
        d = checkpoint.depth
        combined, count = sequence_service.with_history(history, test, d)
        inputs, targets = sequence_service.window_arrays(combined, d)
        if count and len(targets) != count:
            raise ContractError(f"Expected {count} scorable events, found {len(targets)}")
        times = combined.as_array()
        last_times = times[d:-1] if len(targets) else np.empty(0)
        states = rnn_service.encoder(checkpoint.rnn_params(), d).encode(inputs)
        return states, targets, last_times

    def score_nll(
        self,
        checkpoint: Checkpoint,
        test: EventSequence,
        history: Optional[EventSequence] = None,
        evaluator: Optional[HazardEvaluator] = None,
    ) -> ScoredEvents:
        """Per-event -log p*(t_{i+1} | t_1..t_i) for every scorable test event"""
        states, targets, last_times = self.prepare(checkpoint, test, history)
        if not len(targets):
            logger.warning(f"No scorable events for d={checkpoint.depth} in a test sequence of {test.n} events")
            return ScoredEvents(targets, last_times, states, np.empty(0))
        evaluator = evaluator or HazardEvaluator(checkpoint.hazard(), checkpoint.params)
        cumulative, log_hazard = evaluator.evaluate(targets, states)
        return ScoredEvents(targets, last_times, states, cumulative - log_hazard)

    def predict_median(
        self,
        evaluator: HazardEvaluator,
        states: np.ndarray,
        last_times: np.ndarray,
        tol: float = MEDIAN_TOLERANCE,
    ) -> MedianBatch:
        """
        Median next-event times, solving Phi(t* - t_i | h_i) = log 2

        The upper bracket starts at 1e-6 and doubles until Phi reaches log 2
        or the 2^64 cap. Rows whose Phi stays below log 2 at the cap return
        t_i + cap, and rows with Phi(0) above log 2 return t_i; both are
        flagged as non-converged.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        last_times = np.asarray(last_times, dtype=float).ravel()
        n = len(last_times)
        if n == 0:
            return MedianBatch(np.empty(0), np.zeros(0, dtype=bool), np.zeros(0, dtype=int))
        if len(states) == 1 and n > 1:
            states = np.repeat(states, n, axis=0)

        lo = np.zeros(n)
        hi = np.full(n, MEDIAN_BRACKET_START)
        iterations = np.zeros(n, dtype=int)
        converged = np.zeros(n, dtype=bool)
        tau = np.zeros(n)

        start = evaluator.cumulative(lo, states) - LOG_TWO
        exact = np.abs(start) < tol
        converged |= exact
        done = exact | (start > 0)

        # bracket expansion
        active = ~done
        while np.any(active):
            idx = np.flatnonzero(active)
            f = evaluator.cumulative(hi[idx], states[idx]) - LOG_TWO
            iterations[idx] += 1
            hit = np.abs(f) < tol
            tau[idx[hit]] = hi[idx[hit]]
            converged[idx[hit]] = True
            done[idx[hit]] = True
            grow = (f < 0) & ~hit
            capped = grow & (hi[idx] >= MEDIAN_BRACKET_CAP)
            tau[idx[capped]] = MEDIAN_BRACKET_CAP
            done[idx[capped]] = True
            step = idx[grow & ~capped]
            lo[step] = hi[step]
            hi[step] = np.minimum(hi[step] * 2.0, MEDIAN_BRACKET_CAP)
            active = np.zeros(n, dtype=bool)
            active[step] = True

        # bisection on rows bracketed as Phi(lo) < log 2 <= Phi(hi)
        active = ~done
        for _ in range(MAX_BISECTIONS):
            if not np.any(active):
                break
            idx = np.flatnonzero(active)
            mid = 0.5 * (lo[idx] + hi[idx])
            f = evaluator.cumulative(mid, states[idx]) - LOG_TWO
            iterations[idx] += 1
            tau[idx] = mid
            hit = np.abs(f) < tol
            converged[idx[hit]] = True
            stalled = (mid <= lo[idx]) | (mid >= hi[idx])
            below = f < 0
            lo[idx[below & ~hit]] = mid[below & ~hit]
            hi[idx[~below & ~hit]] = mid[~below & ~hit]
            active[idx[hit | stalled]] = False

        failed = int(np.sum(~converged))
        if failed:
            logger.warning(f"{failed} of {n} median predictions did not converge")
        return MedianBatch(last_times + tau, converged, iterations)

    def predict_stream(
        self,
        checkpoint: Checkpoint,
        test: EventSequence,
        history: Optional[EventSequence] = None,
        chunk: int = 4096,
    ) -> Iterator[Tuple[np.ndarray, MedianBatch]]:
        """Median predictions in chunks of events, with the chunk's last event times"""
        states, _, last_times = self.prepare(checkpoint, test, history)
        evaluator = HazardEvaluator(checkpoint.hazard(), checkpoint.params)
        for start in range(0, len(last_times), chunk):
            window = slice(start, start + chunk)
            yield last_times[window], self.predict_median(evaluator, states[window], last_times[window])

    def predict_many(
        self,
        checkpoint: Checkpoint,
        histories: Sequence[Optional[EventSequence]],
        tests: Sequence[EventSequence],
        carry_history: bool = True,
        threads: int = 1,
    ) -> Iterator[Tuple[int, np.ndarray, MedianBatch]]:
        """predict_stream over every test sequence, chunks tagged with the sequence index"""
        jobs = [(checkpoint, test, history if carry_history else None) for history, test in zip(histories, tests)]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as executor:
                for k, chunks in enumerate(executor.map(_predict_task, jobs)):
                    for last_times, batch in chunks:
                        yield k, last_times, batch
            return
        for k, job in enumerate(jobs):
            for last_times, batch in self.predict_stream(*job):
                yield k, last_times, batch

    def score_mae(self, predicted: np.ndarray, actual: np.ndarray, converged: np.ndarray) -> Tuple[Optional[float], int]:
        """Mean absolute error over converged predictions and the non-converged count"""
        converged = np.asarray(converged, dtype=bool)
        errors = np.abs(np.asarray(actual, dtype=float) - np.asarray(predicted, dtype=float))
        skipped = int(np.sum(~converged))
        if not np.any(converged):
            return None, skipped
        return float(np.mean(errors[converged])), skipped

    def block_scores(self, scores: np.ndarray, block_size: int = BLOCK_SIZE) -> np.ndarray:
        """Means of consecutive full blocks; a trailing partial block is dropped"""
        scores = np.asarray(scores, dtype=float)
        blocks = len(scores) // block_size
        if blocks == 0:
            return np.empty(0)
        return scores[:blocks * block_size].reshape(blocks, block_size).mean(axis=1)

    def percentile_bands(self, blocks: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
        if not len(blocks):
            return None, None
        low, high = np.percentile(blocks, [25.0, 75.0])
        return float(low), float(high)

    def standardized_scores(self, model_report: EvalReport, true_report: EvalReport) -> float:
        """mean_nll(model) - mean_nll(true) over the same test events"""
        if len(model_report.per_event_nll) != len(true_report.per_event_nll):
            raise ContractError(
                f"Reports cover {len(model_report.per_event_nll)} and {len(true_report.per_event_nll)} events"
            )
        return model_report.mean_nll - true_report.mean_nll

    def true_scores(
        self,
        spec: ProcessSpec,
        histories: Sequence[Optional[EventSequence]],
        tests: Sequence[EventSequence],
        counts: Sequence[int],
    ) -> np.ndarray:
        """True-model NLL of the last `counts[k]` events of every joined sequence"""
        parts = []
        for history, test, count in zip(histories, tests, counts):
            scores = simulation_service.true_nll(spec, full_sequence(history, test))
            parts.append(scores[len(scores) - count:] if count else np.empty(0))
        return np.concatenate(parts) if parts else np.empty(0)

    def permutation_test(
        self,
        errors_a: np.ndarray,
        errors_b: np.ndarray,
        resamples: int = PERMUTATION_RESAMPLES,
        seed: int = 0,
        chunk: int = 500,
    ) -> float:
        """
        Two-sided paired sign-flip permutation p-value for equal mean errors

        Returns (1 + #{|mean of flipped differences| >= |observed|}) / (1 + resamples).
        """
        errors_a = np.asarray(errors_a, dtype=float)
        errors_b = np.asarray(errors_b, dtype=float)
        if errors_a.shape != errors_b.shape or not len(errors_a):
            raise ContractError("Paired test needs two non-empty error arrays of equal length")
        diff = errors_a - errors_b
        observed = abs(float(np.mean(diff)))
        rng = make_rng(seed)
        exceed = 0
        for start in range(0, resamples, chunk):
            size = min(chunk, resamples - start)
            signs = rng.choice(np.array([-1.0, 1.0]), size=(size, len(diff)))
            exceed += int(np.sum(np.abs(signs @ diff) / len(diff) >= observed - 1e-15))
        return (1 + exceed) / (1 + resamples)

    def evaluate(
        self,
        checkpoint: Checkpoint,
        histories: Sequence[Optional[EventSequence]],
        tests: Sequence[EventSequence],
        options: EvalOptions = EvalOptions(),
        true_spec: Optional[ProcessSpec] = None,
        name: Optional[str] = None,
        config_hash: str = "",
        seed: int = 0,
    ) -> EvalReport:
        """
        Score a checkpoint on test sequences

        Args:
            checkpoint: Trained model
            histories: Training part of each test sequence, or None entries when
                sequences were split whole
            tests: Test sequences
            options: Block size and history carry-over
            true_spec: Generating process, for standardized scores
            name: Model label used in comparison tables

        Returns:
            EvalReport: Per-event scores, medians, MAE and block bands
        """
        evaluator = HazardEvaluator(checkpoint.hazard(), checkpoint.params)
        intervals, nll, last_times, predicted, converged, iterations, counts = [], [], [], [], [], [], []
        for history, test in zip(histories, tests):
            scored = self.score_nll(checkpoint, test, history if options.carry_history else None, evaluator)
            medians = self.predict_median(evaluator, scored.states, scored.last_times)
            intervals.append(scored.intervals)
            last_times.append(scored.last_times)
            nll.append(scored.nll)
            predicted.append(medians.predicted_time)
            converged.append(medians.converged)
            iterations.append(medians.iterations)
            counts.append(len(scored.nll))

        intervals = np.concatenate(intervals) if intervals else np.empty(0)
        nll = np.concatenate(nll) if nll else np.empty(0)
        if not len(nll):
            raise ContractError("No test event could be scored")
        predicted = np.concatenate(predicted)
        converged = np.concatenate(converged)
        iterations = np.concatenate(iterations)

        actual = np.concatenate(last_times) + intervals
        abs_errors = np.abs(actual - predicted)
        mae, skipped = self.score_mae(predicted, actual, converged)

        blocks = self.block_scores(nll, options.block_size)
        band_low, band_high = self.percentile_bands(blocks)
        report = EvalReport(
            model=name or checkpoint.kind,
            depth=checkpoint.depth,
            intervals=intervals.tolist(),
            per_event_nll=nll.tolist(),
            mean_nll=float(np.mean(nll)),
            band_low=band_low,
            band_high=band_high,
            block_scores=blocks.tolist(),
            predictions=MedianBatch(predicted, converged, iterations).as_models(),
            abs_errors=[float(e) if c else None for e, c in zip(abs_errors, converged)],
            mae=mae,
            non_converged=skipped,
            config_hash=config_hash,
            seed=seed,
        )

        if true_spec is not None:
            # The generating process always sees the full past, so the truth is not
            # truncated when the model runs without carried history.
            truth = self.true_scores(true_spec, histories, tests, counts)
            report.true_mean_nll = float(np.mean(truth))
            report.standardized_mean_nll = report.mean_nll - report.true_mean_nll
            report.standardized_against = "true"

        logger.info(
            f"{report.model}: mean NLL {report.mean_nll:.5f} over {len(nll)} events, "
            f"MAE {report.mae if report.mae is not None else float('nan'):.5f} ({skipped} non-converged)"
        )
        return report

    def evaluate_many(
        self,
        checkpoints: Sequence[Checkpoint],
        histories: Sequence[Optional[EventSequence]],
        tests: Sequence[EventSequence],
        options: EvalOptions = EvalOptions(),
        true_spec: Optional[ProcessSpec] = None,
        names: Optional[Sequence[Optional[str]]] = None,
        config_hash: str = "",
        seed: int = 0,
        threads: int = 1,
    ) -> List[EvalReport]:
        """evaluate for every checkpoint, up to `threads` at a time; reports come back in checkpoint order"""
        names = list(names) if names is not None else [None] * len(checkpoints)
        jobs = [
            (checkpoint, histories, tests, options, true_spec, name, config_hash, seed)
            for checkpoint, name in zip(checkpoints, names)
        ]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as executor:
                return list(executor.map(_evaluate_task, jobs))
        return [_evaluate_task(job) for job in jobs]

    def standardize_against(self, reports: Sequence[EvalReport], reference: str) -> List[EvalReport]:
        """Subtract the score of the report named `reference` when no true model exists"""
        by_name = {r.model: r for r in reports}
        if reference not in by_name:
            raise ContractError(f"No report named {reference!r} to standardize against")
        ref = by_name[reference]
        out = []
        for report in reports:
            if report.standardized_mean_nll is not None:
                out.append(report)
                continue
            updated = report.model_copy(update={
                "standardized_mean_nll": self.standardized_scores(report, ref),
                "standardized_against": reference,
            })
            out.append(updated)
        return out

    def compare_reports(
        self,
        reports: Sequence[EvalReport],
        resamples: int = PERMUTATION_RESAMPLES,
        seed: int = 0,
        config_hash: str = "",
    ) -> ComparisonTable:
        """One row per model plus the permutation p-value between the two lowest MAEs"""
        rows = [
            ComparisonRow(
                model=r.model,
                mean_nll=r.mean_nll,
                standardized_mean_nll=r.standardized_mean_nll,
                band_low=r.band_low,
                band_high=r.band_high,
                mae=r.mae,
                non_converged=r.non_converged,
            )
            for r in reports
        ]
        table = ComparisonTable(rows=rows, config_hash=config_hash, seed=seed)

        ranked = sorted((r for r in reports if r.mae is not None), key=lambda r: r.mae)
        if len(ranked) >= 2:
            best, runner_up = ranked[0], ranked[1]
            table.best_mae_model = best.model
            table.runner_up_mae_model = runner_up.model
            if len(best.abs_errors) == len(runner_up.abs_errors):
                pairs = [
                    (a, b) for a, b in zip(best.abs_errors, runner_up.abs_errors)
                    if a is not None and b is not None
                ]
                if pairs:
                    a, b = np.array(pairs).T
                    table.mae_p_value = self.permutation_test(a, b, resamples, seed)
            else:
                logger.warning(f"{best.model} and {runner_up.model} cover different events; skipping the paired test")
        return table

    def intensity_curve(
        self,
        checkpoint: Checkpoint,
        history: Optional[EventSequence],
        test: EventSequence,
        intervals: int = 50,
        points: int = 20,
        true_spec: Optional[ProcessSpec] = None,
    ) -> List[Tuple]:
        """
        Rows (t, model intensity[, true intensity]) on a grid inside the first
        `intervals` scorable test intervals, `points` per interval
        """
        states, targets, last_times = self.prepare(checkpoint, test, history)
        count = min(intervals, len(targets))
        if count == 0:
            return []
        evaluator = HazardEvaluator(checkpoint.hazard(), checkpoint.params)
        fractions = np.arange(1, points + 1) / points
        elapsed = (targets[:count, None] * fractions[None, :]).ravel()
        rows_h = np.repeat(states[:count], points, axis=0)
        _, log_hazard = evaluator.evaluate(elapsed, rows_h)
        times = np.repeat(last_times[:count], points) + elapsed
        model_rate = np.exp(log_hazard)
        if true_spec is None:
            return list(zip(times.tolist(), model_rate.tolist()))
        true_rate = simulation_service.true_intensity(true_spec, full_sequence(history, test), times)
        return list(zip(times.tolist(), model_rate.tolist(), true_rate.tolist()))

    def write_report(self, report: EvalReport, json_path: str, csv_path: str) -> Tuple[str, str]:
        """JSON dump of the report and a flat per-event CSV"""
        header = {"config_hash": report.config_hash, "seed": report.seed, "model": report.model}
        write_json(json_path, report.model_dump(mode="json"))
        rows = (
            (i, tau, nll, p.predicted_time, err if err is not None else "", int(p.converged))
            for i, (tau, nll, p, err) in enumerate(zip(
                report.intervals, report.per_event_nll, report.predictions, report.abs_errors,
            ))
        )
        write_csv(csv_path, EVENT_COLUMNS, rows, header)
        logger.info(f"Wrote report for {report.model} to {json_path} and {csv_path}")
        return json_path, csv_path

    def write_comparison(self, table: ComparisonTable, json_path: str, csv_path: str) -> Tuple[str, str]:
        write_json(json_path, table.model_dump(mode="json"))
        columns = ("model", "mean_nll", "standardized_mean_nll", "band_low", "band_high", "mae", "non_converged")
        rows = ([getattr(row, c) if getattr(row, c) is not None else "" for c in columns] for row in table.rows)
        write_csv(csv_path, columns, rows, {"config_hash": table.config_hash, "seed": table.seed})
        return json_path, csv_path


evaluation_service = EvaluationService()
