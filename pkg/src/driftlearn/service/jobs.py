"""Thread-backed job registry for long-running runs and grids."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass
from typing import Callable

from ..errors import DataError, DriftlearnError

ERROR_KINDS = {1: "configuration", 2: "data", 3: "numerical"}
EXIT_CODES = {"configuration": 1, "data": 2, "numerical": 3, "internal": 1}


@dataclass
class Job:
    job_id: str
    kind: str
    state: str = "queued"
    error: dict | None = None
    result: dict | None = None


class JobRegistry:
    """In-process registry; one worker thread per submitted job."""

    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def submit(self, kind: str, fn: Callable[[], dict]) -> dict:
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind)
        with self._lock:
            self._jobs[job.job_id] = job

        def worker():
            with self._lock:
                job.state = "running"
            try:
                result = fn()
            except DriftlearnError as exc:
                with self._lock:
                    job.error = {
                        "kind": ERROR_KINDS.get(exc.exit_code, "data"),
                        "message": str(exc),
                    }
                    job.state = "failed"
            except Exception as exc:
                with self._lock:
                    job.error = {
                        "kind": "internal",
                        "message": f"{type(exc).__name__}: {exc}",
                    }
                    job.state = "failed"
            else:
                with self._lock:
                    job.result = result
                    job.state = "done"

        threading.Thread(target=worker, daemon=True).start()
        return {"job_id": job.job_id, "kind": job.kind, "state": "queued"}

    def status(self, job_id: str) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise DataError(f"no such job: {job_id}")
            return {
                "job_id": job.job_id,
                "kind": job.kind,
                "state": job.state,
                "error": job.error,
                "result": job.result,
            }
