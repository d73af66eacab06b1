# logging_config.py
from __future__ import annotations

import logging
import sys
from typing import Iterable

from run_context import get_run_id

FORMAT = "%(asctime)s %(levelname)s %(name)s [%(process)d] [run=%(run_id)s] %(message)s"
APP_LOGGERS = ("cli", "em", "gp", "kernels", "selection", "models", "synthdata", "experiments", "jobs")

# Attributes every LogRecord carries; anything else arrived through `extra`.
_RECORD_KEYS = frozenset(logging.LogRecord("", 0, "", 0, "", None, None).__dict__) | {"message", "asctime", "run_id"}

class RunIdFilter(logging.Filter):
    """Stamp the current run id on records that were not given one explicitly."""
    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "run_id"):
            record.run_id = get_run_id()
        return True

class ExtraFormatter(logging.Formatter):
    """Append the `extra={...}` fields of a record as sorted key=value pairs."""

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        fields = sorted(k for k in record.__dict__ if k not in _RECORD_KEYS)
        if not fields:
            return line
        return line + " | " + " ".join(f"{k}={_short(record.__dict__[k])}" for k in fields)

def _short(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    text = str(value)
    return text if len(text) <= 120 else text[:117] + "..."

def _stream_handler(root: logging.Logger) -> logging.Handler:
    for h in root.handlers:
        if isinstance(h, logging.StreamHandler):
            return h
    handler = logging.StreamHandler(sys.stdout)
    root.addHandler(handler)
    return handler

def setup_logging(level: int | str = logging.INFO, loggers: Iterable[str] = APP_LOGGERS) -> None:
    """Idempotent: repeated calls reconfigure the one stdout handler in place."""
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    root = logging.getLogger()
    root.setLevel(level)

    handler = _stream_handler(root)
    handler.setFormatter(ExtraFormatter(FORMAT))
    if not any(isinstance(f, RunIdFilter) for f in handler.filters):
        handler.addFilter(RunIdFilter())

    for name in loggers:
        lg = logging.getLogger(name)
        lg.setLevel(level)
        lg.propagate = True
