# errors.py
from __future__ import annotations

from typing import Any, Optional


class GPSelectError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a command."""
    exit_code: int = 1

    def __init__(self, detail: str, *, exit_code: Optional[int] = None) -> None:
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(GPSelectError):
    exit_code = 2


class NumericalError(GPSelectError):
    """Unrecoverable numerical failure. `trace` holds the iterations completed before it."""
    exit_code = 3

    def __init__(self, detail: str, *, trace: Any = None, context: Optional[dict] = None) -> None:
        super().__init__(detail)
        self.trace = trace
        self.context = context or {}


class InvalidArgumentError(GPSelectError, ValueError):
    exit_code = 2
