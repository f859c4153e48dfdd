"""
Script for running the synthetic benchmark at desk scale: every preset
process is simulated, the four hazard models are fitted on its first 80% of
events, and their standardized test scores are collected into one table.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from loguru import logger

from src.commands.evaluate_command import cmd_evaluate
from src.commands.fit_command import MODEL_KINDS, cmd_fit
from src.commands.simulate_command import cmd_simulate
from src.models.config_models import (
    EvaluateRunConfig,
    FitRunConfig,
    SimulateRunConfig,
    TrainConfig,
)
from src.services.simulation_service import preset
from src.utils.config import SYNTHETIC_PROCESSES
from src.utils.io_utils import write_csv
from src.utils.logging import configure_logging


def run_process(name: str, args) -> list:
    spec = preset(name)
    data_dir = os.path.join(args.out, "data")
    manifest = cmd_simulate(SimulateRunConfig(process=spec, n=args.n, seed=args.seed, out=data_dir))

    train = TrainConfig(max_epochs=args.max_epochs, patience=args.patience, depth_grid=tuple(args.depths))
    checkpoints = []
    for kind in args.models:
        run_dir = os.path.join(args.out, "runs", name)
        cmd_fit(FitRunConfig(data=manifest.files[0], model=kind, train=train, seed=args.seed, out=run_dir))
        checkpoints.append(os.path.join(run_dir, f"{kind}.ckpt"))

    reports = cmd_evaluate(EvaluateRunConfig(
        data=manifest.files[0],
        checkpoints=checkpoints,
        true_spec=spec,
        seed=args.seed,
        out=os.path.join(args.out, "reports", name),
    ))
    return [
        (name, r.model, r.mean_nll, r.standardized_mean_nll, r.mae if r.mae is not None else "", r.non_converged)
        for r in reports
    ]


def main():
    parser = argparse.ArgumentParser(description="Synthetic benchmark over all preset processes")
    parser.add_argument("--n", type=int, default=20000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--processes", nargs="+", default=list(SYNTHETIC_PROCESSES))
    parser.add_argument("--models", nargs="+", default=list(MODEL_KINDS), choices=MODEL_KINDS)
    parser.add_argument("--depths", nargs="+", type=int, default=[5, 10, 20, 40])
    parser.add_argument("--max-epochs", type=int, default=100)
    parser.add_argument("--patience", type=int, default=5)
    parser.add_argument("--out", default="suite")
    args = parser.parse_args()

    configure_logging(log_file=os.path.join(args.out, "suite.log"))
    rows = []
    for name in args.processes:
        logger.info(f"Running {name}")
        rows += run_process(name, args)

    path = write_csv(
        os.path.join(args.out, "summary.csv"),
        ("process", "model", "mean_nll", "standardized_nll", "mae", "non_converged"),
        rows,
        {"seed": args.seed, "n": args.n},
    )
    logger.info(f"Summary written to {path}")


if __name__ == "__main__":
    main()
