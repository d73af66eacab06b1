# jobs.py
from __future__ import annotations
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional
import logging, threading, uuid

from run_context import bind_run_id

log = logging.getLogger("jobs")

def _now() -> str:
    return datetime.now(timezone.utc).isoformat()

@dataclass
class Job:
    id: str
    label: str
    status: str = "pending"  # pending|running|done|error
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)
    steps: List[Dict[str, Any]] = field(default_factory=list)  # {'seq', 'ts', 'msg'}
    result: Optional[Any] = None
    error: Optional[BaseException] = None

    @property
    def finished(self) -> bool:
        return self.status in ("done", "error")

class RunManager:
    """Runs repetitions on worker threads, at most `max_workers` at a time.

    numpy/scipy release the GIL inside BLAS/LAPACK, so threads give real parallelism
    for the E-step and GP solves. Each job binds its own run id for log records.
    """

    def __init__(self, max_workers: int = 1):
        if max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {max_workers}")
        self._jobs: Dict[str, Job] = {}
        self._threads: Dict[str, threading.Thread] = {}
        self._lock = threading.Lock()
        self._pool = threading.BoundedSemaphore(max_workers)
        self.max_workers = max_workers

    def _progress_for(self, job: Job) -> Callable[[str], None]:
        def progress(msg: str) -> None:
            with self._lock:
                seq = len(job.steps) + 1
                job.steps.append({"seq": seq, "ts": _now(), "msg": msg})
                job.updated_at = _now()
        return progress

    def submit(self, target: Callable[..., Any], *, label: str, args: tuple = (), kwargs: dict | None = None) -> Job:
        """Start `target(*args, **kwargs, progress=...)` once a worker slot is free."""
        if kwargs is None:
            kwargs = {}
        job = Job(id=uuid.uuid4().hex[:12], label=label)
        with self._lock:
            self._jobs[job.id] = job

        log.info("Job created", extra={"job_id": job.id, "label": label, "target": target.__name__})
        progress = self._progress_for(job)

        def runner():
            self._pool.acquire()
            bind_run_id(label)
            try:
                with self._lock:
                    job.status = "running"
                    job.updated_at = _now()
                progress("Job started")
                res = target(*args, **{**kwargs, "progress": progress})
                with self._lock:
                    job.result = res
                    job.status = "done"
                    job.updated_at = _now()
                progress("Job finished")
                log.info("Job completed", extra={"job_id": job.id, "label": label})
            except Exception as e:
                with self._lock:
                    job.error = e
                    job.status = "error"
                    job.updated_at = _now()
                progress(f"Error: {e}")
                log.error("Job failed", extra={"job_id": job.id, "label": label, "error": str(e)})
            finally:
                self._pool.release()

        thread = threading.Thread(target=runner, name=f"job-{label}", daemon=True)
        with self._lock:
            self._threads[job.id] = thread
        thread.start()
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def wait(self, timeout: Optional[float] = None) -> List[Job]:
        """Block until every submitted job has finished; jobs in submission order."""
        with self._lock:
            threads = list(self._threads.values())
        for thread in threads:
            thread.join(timeout)
        with self._lock:
            return list(self._jobs.values())
