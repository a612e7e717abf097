"""Thread-backed background jobs for long-running training work."""

from __future__ import annotations

import threading
import traceback
import uuid
from dataclasses import dataclass, field


@dataclass
class Job:
    job_id: str
    kind: str
    state: str = "pending"  # pending | running | completed | failed
    detail: dict = field(default_factory=dict)
    error: str | None = None


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def submit(self, kind: str, fn, detail: dict | None = None) -> Job:
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind, detail=dict(detail or {}))
        with self._lock:
            self._jobs[job.job_id] = job

        def runner():
            self.update(job.job_id, state="running")
            try:
                result = fn(lambda **kw: self.update(job.job_id, detail_patch=kw))
                self.update(job.job_id, state="completed", detail_patch=result or {})
            except Exception as exc:  # noqa: BLE001 - job boundary
                self.update(job.job_id, state="failed",
                            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=4)}")

        threading.Thread(target=runner, daemon=True, name=f"job-{job.job_id}").start()
        return job

    def update(self, job_id: str, state: str | None = None, error: str | None = None,
               detail_patch: dict | None = None) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if state:
                job.state = state
            if error:
                job.error = error
            if detail_patch:
                job.detail.update(detail_patch)

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                return None
            return Job(job.job_id, job.kind, job.state, dict(job.detail), job.error)

    def list(self) -> list[Job]:
        with self._lock:
            return [Job(j.job_id, j.kind, j.state, dict(j.detail), j.error) for j in self._jobs.values()]

    def wait(self, job_id: str, timeout: float | None = None, poll: float = 0.05) -> Job:
        import time

        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            job = self.get(job_id)
            if job is None:
                raise KeyError(job_id)
            if job.state in ("completed", "failed"):
                return job
            if deadline is not None and time.monotonic() > deadline:
                return job
            time.sleep(poll)
