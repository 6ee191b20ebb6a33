"""Sessions and edit jobs over a bounded worker pool.

A session owns one image (plus mask and optional depth) and its inversion
trajectory; inversion runs once per session, in the background, and edits
wait until it lands.  At most one edit job per session runs at a time;
further submissions queue on the session lock.  All state transitions are
guarded and monotone: queued -> editing -> done | failed.
"""

from __future__ import annotations

import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .diffnet import DenoiseUNet, NoiseSchedule
from .pipeline import EditConfig, EditResult, encode_image, run_edit
from .sampler import Trajectory, invert


class UnknownIdError(KeyError):
    pass


class SessionBusyError(RuntimeError):
    pass


@dataclass
class Session:
    id: str
    image: np.ndarray
    mask: np.ndarray
    depth: Optional[np.ndarray]
    steps: int
    state: str = "inverting"          # inverting | ready | failed
    error: Optional[str] = None
    trajectory: Optional[Trajectory] = None
    inversion_count: int = 0
    created_at: float = field(default_factory=time.time)
    edit_lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class Job:
    id: str
    session_id: str
    config: EditConfig
    state: str = "queued"             # queued | editing | done | failed
    progress: float = 0.0
    error: Optional[str] = None
    step_records: List[dict] = field(default_factory=list)
    loss_records: List[dict] = field(default_factory=list)
    result: Optional[EditResult] = None
    created_at: float = field(default_factory=time.time)
    started_at: Optional[float] = None
    finished_at: Optional[float] = None


_STATE_ORDER = {"queued": 0, "editing": 1, "done": 2, "failed": 2}


class JobStore:
    """Thread-safe registry of sessions and jobs, plus the worker pool."""

    def __init__(self, model: DenoiseUNet, schedule: NoiseSchedule,
                 max_workers: int = 2):
        self.model = model
        self.schedule = schedule
        self._lock = threading.RLock()
        self._sessions: Dict[str, Session] = {}
        self._jobs: Dict[str, Job] = {}
        self._pool = ThreadPoolExecutor(max_workers=max_workers)

    # --- sessions ---------------------------------------------------------

    def create_session(self, image: np.ndarray, mask: np.ndarray,
                       depth: Optional[np.ndarray], steps: int = 50) -> Session:
        session = Session(id=uuid.uuid4().hex[:12], image=image, mask=mask,
                          depth=depth, steps=steps)
        with self._lock:
            self._sessions[session.id] = session
        self._pool.submit(self._invert_session, session)
        return session

    def _invert_session(self, session: Session) -> None:
        try:
            z0 = encode_image(session.image, self.model.cfg.latent_size,
                              self.model.cfg.latent_channels)
            session.trajectory = invert(self.model, self.schedule, z0,
                                        self.model.null_text.detach(),
                                        n_steps=session.steps)
            session.inversion_count += 1
            session.state = "ready"
        except Exception as exc:  # surfaced to clients via session state
            session.error = f"{type(exc).__name__}: {exc}"
            session.state = "failed"

    def get_session(self, session_id: str) -> Session:
        with self._lock:
            if session_id not in self._sessions:
                raise UnknownIdError(session_id)
            return self._sessions[session_id]

    def wait_session(self, session_id: str, timeout: float = 120.0) -> Session:
        """Block until the session leaves the inverting state (for tests/CLI)."""
        session = self.get_session(session_id)
        deadline = time.time() + timeout
        while session.state == "inverting" and time.time() < deadline:
            time.sleep(0.02)
        return session

    # --- jobs --------------------------------------------------------------

    def submit_edit(self, session_id: str, config: EditConfig) -> Job:
        session = self.get_session(session_id)
        if session.state == "inverting":
            raise SessionBusyError(f"session {session_id} is still inverting")
        if session.state == "failed":
            raise SessionBusyError(f"session {session_id} failed: {session.error}")
        if config.steps != session.steps:
            raise ValueError(
                f"config steps {config.steps} != session inversion steps {session.steps}")
        job = Job(id=uuid.uuid4().hex[:12], session_id=session_id, config=config)
        with self._lock:
            self._jobs[job.id] = job
        self._pool.submit(self._run_job, job, session)
        return job

    def _set_state(self, job: Job, state: str) -> None:
        with self._lock:
            if _STATE_ORDER[state] < _STATE_ORDER[job.state]:
                raise RuntimeError(f"illegal transition {job.state} -> {state}")
            job.state = state

    def _run_job(self, job: Job, session: Session) -> None:
        with session.edit_lock:   # one running edit per session
            self._set_state(job, "editing")
            job.started_at = time.time()
            try:
                n_total = job.config.steps

                def progress(done, total, record):
                    job.progress = done / total
                    job.step_records.append(record)
                    if record.get("terms"):
                        for term, value in record["terms"].items():
                            job.loss_records.append({
                                "step": record["step"], "term": term, "value": value,
                                "w_remove": record["w_remove"], "lr": record["lr"],
                            })

                job.result = run_edit(
                    session.image, session.mask, job.config,
                    self.model, self.schedule,
                    depth=session.depth, trajectory=session.trajectory,
                    progress=progress,
                )
                job.progress = 1.0
                self._set_state(job, "done")
            except Exception as exc:
                job.error = f"{type(exc).__name__}: {exc}"
                self._set_state(job, "failed")
            finally:
                job.finished_at = time.time()

    def get_job(self, job_id: str) -> Job:
        with self._lock:
            if job_id not in self._jobs:
                raise UnknownIdError(job_id)
            return self._jobs[job_id]

    def wait_job(self, job_id: str, timeout: float = 300.0) -> Job:
        job = self.get_job(job_id)
        deadline = time.time() + timeout
        while job.state not in ("done", "failed") and time.time() < deadline:
            time.sleep(0.02)
        return job

    def shutdown(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)
