"""JSONL run logs.

Each run writes ``<run_id>.jsonl`` (one ``LogLine`` per evaluation point)
and ``<run_id>.json`` with run metadata (learning rate, batch size, seed,
layout, model config). Keys are sorted and floats use ``repr`` precision, so
a log line round-trips exactly through ``parse_line(serialize_line(x))``.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

LOG_FIELDS = ("run_id", "step", "tokens", "raw_loss", "norms", "lr_effective", "wall_ms")


class LogSchemaError(ValueError):
    pass


@dataclass
class LogLine:
    run_id: str
    step: int
    tokens: int
    raw_loss: float
    norms: dict
    lr_effective: dict
    wall_ms: float = 0.0


def serialize_line(line: LogLine) -> str:
    return json.dumps(asdict(line), sort_keys=True)


def parse_line(text: str, where: str = "<string>") -> LogLine:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LogSchemaError(f"{where}: invalid JSON ({exc.msg})") from None
    missing = [k for k in LOG_FIELDS if k not in obj]
    if missing:
        raise LogSchemaError(f"{where}: missing fields {missing}")
    extra = sorted(set(obj) - set(LOG_FIELDS))
    if extra:
        raise LogSchemaError(f"{where}: unknown fields {extra}")
    return LogLine(**obj)


def read_log(path) -> list:
    lines = []
    with open(path) as f:
        for i, text in enumerate(f, start=1):
            if text.strip():
                lines.append(parse_line(text, f"{path}:{i}"))
    for prev, cur in zip(lines, lines[1:]):
        if cur.step <= prev.step or cur.tokens <= prev.tokens:
            raise LogSchemaError(f"{path}: step/tokens not strictly increasing at step {cur.step}")
    return lines


RUN_META_FIELDS = ("run_id", "eta", "batch_size", "seed", "lr_scales", "context", "vocab_size", "status")


def write_meta(path, meta: dict):
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_runs(logs_dir):
    """Load ``(meta, lines)`` for every run in ``logs_dir``, sorted by run id."""
    logs_dir = Path(logs_dir)
    if not logs_dir.is_dir():
        raise FileNotFoundError(f"{logs_dir}: not a directory")
    runs = []
    for meta_path in sorted(logs_dir.glob("*.json")):
        meta = json.loads(meta_path.read_text())
        missing = [k for k in RUN_META_FIELDS if k not in meta]
        if missing:
            raise LogSchemaError(f"{meta_path}: missing fields {missing}")
        log_path = meta_path.with_suffix(".jsonl")
        lines = read_log(log_path) if log_path.exists() else []
        runs.append((meta, lines))
    if not runs:
        raise LogSchemaError(f"{logs_dir}: no run logs found")
    return runs
