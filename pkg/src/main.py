"""
The `src/main.py` file serves as the command-line entry point of the toolkit.
It builds the argument parser, mounting the `simulate`, `fit`, `evaluate`,
`predict` and `report` subcommands from `src/commands/`, sets up logging, and
maps failures to exit codes: 0 on success, 2 for usage and configuration
errors, 1 for runtime and data errors.

Every subcommand accepts `--config` (a JSON run config) and flags that
override the file's values.
"""

import argparse
import sys
from typing import List, Optional

from loguru import logger

from src.commands import evaluate_command, fit_command, simulate_command
from src.utils.config import DEFAULT_THREADS, LOG_FILE, LOG_LEVEL
from src.utils.errors import ConfigError, PointProcessError
from src.utils.logging import configure_logging

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# parser attributes that are not run-config values
CONTROL_KEYS = {"command", "handler", "config", "verbose", "log_file"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnpp", description="Neural hazard models for temporal point processes")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parsers = [simulate_command.register(subparsers), fit_command.register(subparsers)]
    parsers += list(evaluate_command.register(subparsers))

    for sub in parsers:
        sub.add_argument("--config", help="JSON run config; flags override its values")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--out", help="Output directory")
        sub.add_argument("--verbose", action="store_true", help="Log at DEBUG on the console")
        sub.add_argument("--log-file", dest="log_file", default=LOG_FILE)
        if sub.prog.split()[-1] != "report":
            sub.add_argument("--threads", type=int, help=f"Worker process cap (default {DEFAULT_THREADS})")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    configure_logging(LOG_LEVEL, args.log_file, args.verbose)
    overrides = {k: v for k, v in vars(args).items() if k not in CONTROL_KEYS}

    try:
        return args.handler(args, overrides)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (PointProcessError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
