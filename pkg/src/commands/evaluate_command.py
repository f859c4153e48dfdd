"""
The `evaluate_command` module implements the test-phase subcommands.
The `evaluate` subcommand scores one or more checkpoints on the test part of a
dataset, writing a JSON and CSV report per model, plot-ready block scores,
and a comparison table when several models are given. With a true process
specification the reports carry standardized scores; without one, scores can
be standardized against a reference model. The `predict` subcommand streams
median next-event predictions to CSV, and `report` rebuilds the comparison
table from existing report files.
"""

import argparse
import os
import time
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

from loguru import logger

from src.models.config_models import (
    EvaluateRunConfig,
    PredictRunConfig,
    ReportRunConfig,
    build_config,
    config_hash,
)
from src.models.report_models import ComparisonTable, EvalReport
from src.models.sequence_models import EventSequence
from src.services.evaluation_service import PREDICTION_COLUMNS, evaluation_service
from src.services.sequence_service import sequence_service
from src.services.simulation_service import resolve_process
from src.services.training_service import Checkpoint
from src.utils.io_utils import load_config_file, load_sequences, merge_config, read_json, write_csv

Split = Tuple[List[Optional[EventSequence]], List[EventSequence]]


def register(subparsers):
    evaluate = subparsers.add_parser("evaluate", help="Score checkpoints on test data")
    _data_flags(evaluate)
    evaluate.add_argument("--checkpoints", nargs="+")
    evaluate.add_argument("--true-spec", dest="true_spec", help="Preset name of the generating process")
    evaluate.add_argument("--reference", help="Model to standardize against when no true process is known")
    evaluate.add_argument("--block-size", dest="options.block_size", type=int)
    evaluate.add_argument("--no-history", dest="options.carry_history", action="store_const", const=False)
    evaluate.add_argument("--permutations", dest="options.permutation_resamples", type=int)
    evaluate.add_argument("--intensity-out", dest="intensity_out", help="Directory for intensity-curve CSVs")
    evaluate.add_argument("--intensity-intervals", dest="options.intensity_intervals", type=int)
    evaluate.add_argument("--intensity-points", dest="options.intensity_points", type=int)
    evaluate.set_defaults(handler=run_evaluate)

    predict = subparsers.add_parser("predict", help="Median next-event predictions")
    _data_flags(predict)
    predict.add_argument("--checkpoint")
    predict.add_argument("--no-history", dest="carry_history", action="store_const", const=False)
    predict.set_defaults(handler=run_predict)

    report = subparsers.add_parser("report", help="Comparison table from report files")
    report.add_argument("--reports", nargs="+")
    report.add_argument("--reference")
    report.add_argument("--permutations", dest="permutation_resamples", type=int)
    report.set_defaults(handler=run_report)
    return evaluate, predict, report


def _data_flags(parser):
    parser.add_argument("--data", help="Sequence file or directory")
    parser.add_argument("--format", choices=["plain", "jsonl"])
    parser.add_argument("--train-fraction", dest="train_fraction", type=float)
    parser.add_argument("--split-mode", dest="split_mode", choices=["events", "sequences"])


def run_evaluate(args: argparse.Namespace, overrides: Dict) -> int:
    values = load_config_file(args.config)
    true_spec = args.true_spec or values.get("true_spec")
    if true_spec is not None:
        values["true_spec"] = resolve_process(true_spec)
    overrides = {k: v for k, v in overrides.items() if k != "true_spec"}
    cmd_evaluate(build_config(EvaluateRunConfig, merge_config(values, overrides)))
    return 0


def run_predict(args: argparse.Namespace, overrides: Dict) -> int:
    cmd_predict(build_config(PredictRunConfig, merge_config(load_config_file(args.config), overrides)))
    return 0


def run_report(args: argparse.Namespace, overrides: Dict) -> int:
    cmd_report(build_config(ReportRunConfig, merge_config(load_config_file(args.config), overrides)))
    return 0


def split_for_test(sequences: Sequence[EventSequence], train_fraction: float, mode: str) -> Split:
    """Histories and test parts, reproducing the split used for training"""
    usable = [seq for seq in sequences if seq.n >= 2]
    if len(usable) < len(sequences):
        logger.warning(f"Ignoring {len(sequences) - len(usable)} sequences with fewer than 2 events")
    if not usable:
        return [], []
    train, test = sequence_service.split_dataset(usable, train_fraction, mode)
    if mode == "events":
        return list(train), list(test)
    return [None] * len(test), list(test)


def model_names(paths: Sequence[str], checkpoints: Sequence[Checkpoint]) -> List[str]:
    """Model kind as the name, falling back to the file stem when kinds repeat"""
    kinds = Counter(c.kind for c in checkpoints)
    return [
        c.kind if kinds[c.kind] == 1 else os.path.splitext(os.path.basename(p))[0]
        for p, c in zip(paths, checkpoints)
    ]


def cmd_evaluate(config: EvaluateRunConfig) -> List[EvalReport]:
    """Write `<name>_report.json`, `<name>_events.csv` and `<name>_blocks.csv` per checkpoint"""
    digest = config_hash(config)
    sequences = load_sequences(config.data, config.format)
    histories, tests = split_for_test(sequences, config.train_fraction, config.split_mode)
    checkpoints = [Checkpoint.load(path) for path in config.checkpoints]
    names = model_names(config.checkpoints, checkpoints)

    reports = evaluation_service.evaluate_many(
        checkpoints, histories, tests, config.options, config.true_spec, names, digest, config.seed, config.threads,
    )
    for path, checkpoint, report in zip(config.checkpoints, checkpoints, reports):
        report.checkpoint = path
        name = report.model

        if config.intensity_out:
            rows = []
            for history, test in zip(histories, tests):
                rows += evaluation_service.intensity_curve(
                    checkpoint,
                    history if config.options.carry_history else None,
                    test,
                    config.options.intensity_intervals,
                    config.options.intensity_points,
                    config.true_spec,
                )
            columns = ("t", "model_intensity") + (("true_intensity",) if config.true_spec else ())
            write_csv(
                os.path.join(config.intensity_out, f"{name}_intensity.csv"),
                columns,
                rows,
                {"config_hash": digest, "seed": config.seed},
            )

    if config.reference and config.true_spec is None:
        reports = evaluation_service.standardize_against(reports, config.reference)

    header = {"config_hash": digest, "seed": config.seed}
    for report in reports:
        base = os.path.join(config.out, report.model)
        evaluation_service.write_report(report, f"{base}_report.json", f"{base}_events.csv")
        write_csv(f"{base}_blocks.csv", ("block", "score"), enumerate(report.block_scores), header)

    if len(reports) > 1:
        table = evaluation_service.compare_reports(
            reports, config.options.permutation_resamples, config.seed, digest,
        )
        evaluation_service.write_comparison(
            table, os.path.join(config.out, "comparison.json"), os.path.join(config.out, "comparison.csv"),
        )
    return reports


def cmd_predict(config: PredictRunConfig) -> str:
    """Stream median predictions for every test event into `<out>/<model>_predictions.csv`"""
    digest = config_hash(config)
    started = time.perf_counter()
    checkpoint = Checkpoint.load(config.checkpoint)
    sequences = load_sequences(config.data, config.format)
    histories, tests = split_for_test(sequences, config.train_fraction, config.split_mode)

    def rows():
        index = 0
        chunks = evaluation_service.predict_many(checkpoint, histories, tests, config.carry_history, config.threads)
        for k, last_times, batch in chunks:
            for t_last, t_pred, ok, steps in zip(last_times, batch.predicted_time, batch.converged, batch.iterations):
                yield k, index, float(t_last), float(t_pred), int(ok), int(steps)
                index += 1

    path = write_csv(
        os.path.join(config.out, f"{checkpoint.kind}_predictions.csv"),
        ("sequence",) + PREDICTION_COLUMNS,
        rows(),
        {"config_hash": digest, "seed": config.seed},
    )
    logger.info(f"Wrote predictions to {path} in {time.perf_counter() - started:.2f}s")
    return path


def cmd_report(config: ReportRunConfig) -> ComparisonTable:
    """Comparison table (`comparison.csv` and `comparison.json`) from EvalReport JSON files"""
    digest = config_hash(config)
    reports = [EvalReport.model_validate(read_json(path)) for path in config.reports]
    if config.reference:
        reports = evaluation_service.standardize_against(reports, config.reference)
    table = evaluation_service.compare_reports(reports, config.permutation_resamples, config.seed, digest)
    evaluation_service.write_comparison(
        table, os.path.join(config.out, "comparison.json"), os.path.join(config.out, "comparison.csv"),
    )
    logger.info(f"Compared {len(reports)} reports")
    return table
