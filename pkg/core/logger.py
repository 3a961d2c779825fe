"""Append-only solver log (``logs/qdsolve.log``) with optional per-run copies."""

from __future__ import annotations

from contextlib import contextmanager
from datetime import datetime
import os
from typing import Any, Iterator, List, Mapping, Optional

from QDSolve.config.config import SETTINGS

LOG_DIR: Optional[str] = None
LOG_FILE: Optional[str] = None
LOG_NEEDS_SEPARATOR = False

# extra files receiving every line while a run_log() block is open
_RUN_SINKS: List[str] = []

_ECHO_PREFIXES = (
    "psi* not unique",
    "trajectory saved",
    "history saved",
    "summary saved",
)


def _ensure_log() -> None:
    global LOG_DIR, LOG_FILE, LOG_NEEDS_SEPARATOR
    if LOG_DIR and LOG_FILE:
        return
    LOG_DIR = LOG_DIR or SETTINGS.log_dir
    os.makedirs(LOG_DIR, exist_ok=True)
    LOG_FILE = os.path.join(LOG_DIR, "qdsolve.log")
    LOG_NEEDS_SEPARATOR = True


def _write(path: str, lines: List[str]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.writelines(lines)


def _log(message: str, echo: Optional[bool] = None) -> None:
    """Timestamped line to the solver log; never raises.

    ``echo`` forces (or suppresses) a copy on stdout; by default only
    nonuniqueness warnings and saved-file notices are echoed when verbose.
    """
    global LOG_NEEDS_SEPARATOR
    try:
        _ensure_log()
        ts = datetime.now().astimezone().strftime("%Y-%m-%dT%H:%M:%S%z")
        line = f"[{ts}] {message}\n"
        lines = ["\n", line] if LOG_NEEDS_SEPARATOR else [line]
        LOG_NEEDS_SEPARATOR = False
        _write(LOG_FILE, lines)
        for sink in _RUN_SINKS:
            _write(sink, [line])
        if echo is None:
            echo = SETTINGS.verbose and message.startswith(_ECHO_PREFIXES)
        if echo:
            print(message, flush=True)
    except Exception:
        pass


def log_block(title: str, fields: Mapping[str, Any]) -> None:
    """One header line followed by indented ``key = value`` lines."""
    width = max((len(k) for k in fields), default=0)
    body = "".join(f"\n    {k.ljust(width)} = {v}" for k, v in fields.items())
    _log(f"{title}{body}", echo=False)


@contextmanager
def run_log(path: str) -> Iterator[str]:
    """Mirror every log line into ``path`` while the block is open."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    _RUN_SINKS.append(path)
    try:
        yield path
    finally:
        _RUN_SINKS.remove(path)
