import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

from dotenv import load_dotenv

from deltaKit.core.exceptions import ConfigError

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "DELTAKIT_NUM_THREADS"
ENV_LOG_LEVEL = "DELTAKIT_LOG_LEVEL"
ENV_LOG_DIR = "DELTAKIT_LOG_DIR"


def load_environment() -> None:
    """Load `.env` from the working directory (if present) without overriding real env vars."""
    load_dotenv(override=False)


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got '{raw}'", [{"field": name, "error": "not an int"}])
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}", [{"field": name, "error": "must be >= 1"}])
    return value


def resolve_threads(cli_value: Optional[int] = None) -> int:
    """`--threads` wins over DELTAKIT_NUM_THREADS, which wins over 1."""
    if cli_value is not None:
        if cli_value < 1:
            raise ConfigError("--threads must be >= 1", [{"field": "threads", "error": "must be >= 1"}])
        return cli_value
    return _env_int(ENV_THREADS, 1)


def resolve_log_level(cli_value: Optional[str] = None) -> int:
    name = (cli_value or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level '{name}'", [{"field": "log_level", "error": "unknown"}])
    return level


def resolve_log_dir(cli_value: Optional[str] = None) -> str:
    return cli_value or os.getenv(ENV_LOG_DIR) or "logs"


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Map over items on a thread pool; results come back in input order regardless of scheduling."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def rows_to_csv(rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def write_text(text: str, path: Optional[str] = None) -> None:
    """Write to `path`, or to stdout when no path (or '-') is given."""
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)


def write_csv(rows: Iterable[Dict[str, Any]], columns: Sequence[str], path: Optional[str] = None) -> None:
    write_text(rows_to_csv(rows, columns), path)


def write_json(payload: Any, path: Optional[str] = None) -> None:
    write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", path)


def format_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    """Plain fixed-width table for humans, rendered from the same rows as the CSV."""
    def cell(value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.3e}" if value and (abs(value) < 1e-3 or abs(value) >= 1e5) else f"{value:.4f}"
        return str(value)

    rendered = [[cell(row.get(c, "")) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in rendered]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rendered)
    return "\n".join(lines) + "\n"
