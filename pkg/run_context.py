from __future__ import annotations

import uuid
from contextvars import ContextVar

_run_id: ContextVar[str] = ContextVar("_run_id", default="-")

def new_run_id(label: str | None = None) -> str:
    rid = f"{label}-{uuid.uuid4().hex[:6]}" if label else uuid.uuid4().hex[:12]
    _run_id.set(rid)
    return rid

def bind_run_id(rid: str) -> None:
    _run_id.set(rid)

def get_run_id() -> str:
    return _run_id.get()
