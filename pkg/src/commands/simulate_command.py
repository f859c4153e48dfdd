"""
The `simulate_command` module implements the `simulate` subcommand.
It resolves the process specification (a preset name such as `hawkes1`, or a
process kind with explicit parameters), generates one or more independently
seeded sequences through `src/services/simulation_service.py`, and writes
them together with a JSON manifest recording the specification, seeds, event
counts and config hash.
"""

import argparse
import os
from typing import Dict

from loguru import logger

from src.models.config_models import SimulateRunConfig, build_config, config_hash
from src.models.report_models import SimulationManifest
from src.services.simulation_service import PRESETS, resolve_process, simulation_service
from src.utils.io_utils import load_config_file, merge_config, write_json, write_sequences
from src.utils.random_utils import split_seeds


def register(subparsers):
    parser = subparsers.add_parser("simulate", help="Generate synthetic event sequences")
    parser.add_argument("--process", help=f"Preset ({', '.join(PRESETS)}) or process kind")
    parser.add_argument("--n", type=int, help="Events per sequence")
    parser.add_argument("--sequences", type=int, help="Number of independently seeded sequences")
    parser.add_argument("--format", choices=["plain", "jsonl"])
    parser.add_argument("--rate", dest="process.rate", type=float)
    parser.add_argument("--mu", dest="process.mu", type=float)
    parser.add_argument("--alpha", dest="process.alpha", type=float, nargs="+")
    parser.add_argument("--beta", dest="process.beta", type=float, nargs="+")
    parser.add_argument("--mean", dest="process.mean", type=float)
    parser.add_argument("--std", dest="process.std", type=float)
    parser.add_argument("--trend-amplitude", dest="process.trend_amplitude", type=float)
    parser.add_argument("--trend-period", dest="process.trend_period", type=float)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, overrides: Dict) -> int:
    values = load_config_file(args.config)
    process = args.process or values.get("process")
    if process is not None:
        values["process"] = resolve_process(process)
    overrides = {k: v for k, v in overrides.items() if k != "process"}
    config = build_config(SimulateRunConfig, merge_config(values, overrides))
    cmd_simulate(config)
    return 0


def cmd_simulate(config: SimulateRunConfig) -> SimulationManifest:
    """Simulate, write sequence files and the manifest"""
    digest = config_hash(config)
    spec = config.process
    name = spec.name or spec.kind
    sequences = simulation_service.simulate_many(spec, config.n, config.sequences, config.seed, config.threads)

    header = {"config_hash": digest, "seed": config.seed, "process": name}
    if config.format == "jsonl":
        target = os.path.join(config.out, f"{name}.jsonl")
    elif config.sequences == 1:
        target = os.path.join(config.out, f"{name}.txt")
    else:
        target = os.path.join(config.out, name)
    files = write_sequences(sequences, target, config.format, header)

    manifest = SimulationManifest(
        process=spec.model_dump(mode="json"),
        seed=config.seed,
        sequence_seeds=split_seeds(config.seed, config.sequences),
        counts=[seq.n for seq in sequences],
        files=files,
        config_hash=digest,
    )
    manifest_path = write_json(os.path.join(config.out, f"{name}_manifest.json"), manifest.model_dump(mode="json"))
    logger.info(f"Wrote manifest to {manifest_path}")
    return manifest
