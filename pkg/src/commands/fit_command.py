"""
The `fit_command` module implements the `fit` subcommand. It loads the
dataset, keeps the training part of the chronological (or per-sequence)
split, trains the requested hazard model over the truncation-depth grid with
`src/services/training_service.py`, and writes the checkpoint plus a CSV
training log with per-epoch train and validation NLL.
"""

import argparse
import os
from typing import Dict

from loguru import logger

from src.models.config_models import FitRunConfig, build_config, config_hash
from src.services.sequence_service import sequence_service
from src.services.training_service import HISTORY_COLUMNS, FitResult, training_service
from src.utils.errors import TrainingError
from src.utils.io_utils import load_config_file, load_sequences, merge_config, write_csv

MODEL_KINDS = ("constant", "exponential", "piecewise", "chfn")


def register(subparsers):
    parser = subparsers.add_parser("fit", help="Train a hazard model on event data")
    parser.add_argument("--data", help="Sequence file or directory")
    parser.add_argument("--format", choices=["plain", "jsonl"])
    parser.add_argument("--model", choices=MODEL_KINDS)
    parser.add_argument("--train-fraction", dest="train_fraction", type=float)
    parser.add_argument("--split-mode", dest="split_mode", choices=["events", "sequences"])
    parser.add_argument("--lr", dest="train.learning_rate", type=float)
    parser.add_argument("--batch-size", dest="train.batch_size", type=int)
    parser.add_argument("--depths", dest="train.depth_grid", type=int, nargs="+")
    parser.add_argument("--validation-fraction", dest="train.validation_fraction", type=float)
    parser.add_argument("--max-epochs", dest="train.max_epochs", type=int)
    parser.add_argument("--patience", dest="train.patience", type=int)
    parser.add_argument("--rnn-units", dest="train.rnn_units", type=int)
    parser.add_argument("--hidden-units", dest="train.hidden_units", type=int)
    parser.add_argument("--hidden-layers", dest="train.hidden_layers", type=int)
    parser.add_argument("--bins", dest="train.bins", type=int)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, overrides: Dict) -> int:
    config = build_config(FitRunConfig, merge_config(load_config_file(args.config), overrides))
    cmd_fit(config)
    return 0


def cmd_fit(config: FitRunConfig) -> FitResult:
    """Train and write `<out>/<model>.ckpt` and `<out>/<model>_history.csv`"""
    digest = config_hash(config)
    sequences = load_sequences(config.data, config.format)
    usable = [seq for seq in sequences if seq.n >= 2]
    if len(usable) < len(sequences):
        logger.warning(f"Ignoring {len(sequences) - len(usable)} sequences with fewer than 2 events")
    if not usable:
        raise TrainingError(f"No usable sequences in {config.data}")
    train, _ = sequence_service.split_dataset(usable, config.train_fraction, config.split_mode)

    train_config = config.train.model_copy(update={"seed": config.seed})
    result = training_service.fit(train, config.model, train_config, digest, config.threads)

    os.makedirs(config.out, exist_ok=True)
    result.checkpoint.save(os.path.join(config.out, f"{config.model}.ckpt"))
    history_path = write_csv(
        os.path.join(config.out, f"{config.model}_history.csv"),
        HISTORY_COLUMNS,
        result.history,
        {"config_hash": digest, "seed": config.seed, "chosen_d": result.checkpoint.depth},
    )
    logger.info(f"Wrote training log to {history_path}")
    return result
