"""
The `io_utils` module provides file input and output for event data and
run artifacts. It includes `load_sequences` to read plain-text or JSON Lines
sequence files (a single file or a whole directory of them),
`write_sequences` for the inverse, and small helpers that write CSV and JSON
files with the run's config hash and seed embedded.
"""

import csv
import json
import math
import os
from typing import Dict, Iterable, List, Mapping, Sequence

from loguru import logger
from pydantic import ValidationError

from src.models.sequence_models import EventSequence
from src.utils.errors import ConfigError, SequenceParseError, SequenceValidationError

COMMENT_PREFIX = "#"
META_KEY = "_meta"


def format_float(value: float) -> str:
    """Shortest representation that round-trips exactly"""
    return repr(float(value))


def _parse_plain(path: str) -> EventSequence:
    timestamps: List[float] = []
    previous = -math.inf
    first_line = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith(COMMENT_PREFIX):
                continue
            try:
                value = float(line)
            except ValueError:
                raise SequenceParseError(f"{path}: unparseable token {line!r}", line_no)
            if not math.isfinite(value):
                raise SequenceParseError(f"{path}: non-finite timestamp {line!r}", line_no)
            if value < previous:
                raise SequenceValidationError("non-monotone", line_no)
            if not timestamps:
                first_line = line_no
            previous = value
            timestamps.append(value)

    # plain files carry no header, so the window always opens at 0
    t_end = timestamps[-1] if timestamps else 0.0
    try:
        return EventSequence(timestamps=tuple(timestamps), t_start=0.0, t_end=max(t_end, 0.0))
    except ValidationError as e:
        raise SequenceValidationError(f"{path}: {e.errors()[0]['msg']}", first_line)


def _parse_jsonl(path: str) -> List[EventSequence]:
    sequences = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise SequenceParseError(f"{path}: invalid JSON ({e.msg})", line_no)
            if META_KEY in record:
                continue
            timestamps = record.get("timestamps")
            if not isinstance(timestamps, list):
                raise SequenceParseError(f"{path}: missing 'timestamps' list", line_no)
            try:
                values = [float(t) for t in timestamps]
            except (TypeError, ValueError):
                raise SequenceParseError(f"{path}: unparseable timestamp", line_no)
            for a, b in zip(values, values[1:]):
                if b < a:
                    raise SequenceValidationError("non-monotone", line_no)
            t_end = record.get("t_end", values[-1] if values else 0.0)
            try:
                sequences.append(EventSequence(
                    timestamps=tuple(values),
                    t_start=float(record.get("t_start", 0.0)),
                    t_end=float(t_end),
                ))
            except ValidationError as e:
                raise SequenceValidationError(f"{path}: {e.errors()[0]['msg']}", line_no)
    return sequences


def load_sequences(path: str, format: str = "plain") -> List[EventSequence]:
    """
    Load event sequences from a file or a directory of files

    Args:
        path (str): A sequence file, or a directory whose files are read in name order
        format (str): "plain" (one timestamp per line, one sequence per file) or
            "jsonl" (one sequence object per line)

    Returns:
        List[EventSequence]: The validated sequences
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    if os.path.isdir(path):
        suffix = ".jsonl" if format == "jsonl" else ".txt"
        files = sorted(
            os.path.join(path, name) for name in os.listdir(path)
            if name.endswith(suffix)
        )
    else:
        files = [path]

    sequences: List[EventSequence] = []
    for file_path in files:
        if format == "jsonl":
            sequences.extend(_parse_jsonl(file_path))
        elif format == "plain":
            sequences.append(_parse_plain(file_path))
        else:
            raise SequenceParseError(f"Unknown sequence format {format!r}")

    logger.info(f"Loaded {len(sequences)} sequences ({sum(s.n for s in sequences)} events) from {path}")
    return sequences


def _header_line(header: Mapping[str, object]) -> str:
    return COMMENT_PREFIX + " " + " ".join(f"{k}={header[k]}" for k in sorted(header))


def write_sequences(
    sequences: Sequence[EventSequence],
    path: str,
    format: str = "plain",
    header: Mapping[str, object] = None,
) -> List[str]:
    """
    Write sequences in the format `load_sequences` reads back

    Plain format writes `path` itself for a single sequence, otherwise one
    `seq_XXXX.txt` file per sequence inside the directory `path`. JSON Lines
    writes every sequence into `path` after a metadata line.
    """
    header = dict(header or {})
    written = []

    if format == "jsonl":
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps({META_KEY: header}, sort_keys=True) + "\n")
            for seq in sequences:
                record = {
                    "timestamps": [float(t) for t in seq.timestamps],
                    "t_start": seq.t_start,
                    "t_end": seq.t_end,
                }
                f.write(json.dumps(record) + "\n")
        written.append(path)
    elif format == "plain":
        if len(sequences) == 1:
            targets = [path]
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        else:
            os.makedirs(path, exist_ok=True)
            targets = [os.path.join(path, f"seq_{i:04d}.txt") for i in range(len(sequences))]
        for seq, target in zip(sequences, targets):
            with open(target, "w", encoding="utf-8", newline="\n") as f:
                f.write(_header_line(header) + "\n")
                for t in seq.timestamps:
                    f.write(format_float(t) + "\n")
            written.append(target)
    else:
        raise SequenceParseError(f"Unknown sequence format {format!r}")

    logger.info(f"Wrote {len(sequences)} sequences to {path}")
    return written


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence[object]], header: Mapping[str, object] = None) -> str:
    """Write a CSV with a leading `# key=value` comment line"""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header:
            f.write(_header_line(header) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return path


def write_json(path: str, payload: Dict) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_config_file(path: str) -> Dict:
    """Read a JSON run config; missing path means no file values"""
    if not path:
        return {}
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def merge_config(file_values: Mapping[str, object], overrides: Mapping[str, object]) -> Dict:
    """
    Overlay command-line values on a config file's values

    Override keys may be dotted ("train.max_epochs") to reach nested sections;
    None values mean the flag was not given.
    """
    merged = json.loads(json.dumps(dict(file_values)))
    for key, value in overrides.items():
        if value is None:
            continue
        target = merged
        *parents, leaf = key.split(".")
        for part in parents:
            node = target.get(part)
            if not isinstance(node, dict):
                node = {}
                target[part] = node
            target = node
        target[leaf] = list(value) if isinstance(value, tuple) else value
    return merged
