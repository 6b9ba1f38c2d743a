"""HTTP/JSON API over the runtime: sessions, training jobs, metrics."""

from __future__ import annotations

import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .config import Config
from .inference import EmptyStatsError
from .learn import EmptyDatasetError, Hyperparams
from .runtime import Runtime

log = logging.getLogger(__name__)

PARTICIPANT_PATTERN = r"^[A-Za-z0-9][A-Za-z0-9_-]{0,63}$"


class SessionCreateRequest(BaseModel):
    participant_id: str = Field(pattern=PARTICIPANT_PATTERN)
    window_s: Optional[int] = Field(default=None, ge=1, le=300)
    regime: Optional[str] = None


class SessionCreated(BaseModel):
    session_id: str
    status: str = "pending"


class TrainHyperparams(BaseModel):
    learning_rate: Optional[float] = Field(default=None, gt=0)
    epochs: Optional[int] = Field(default=None, ge=0)
    l2_lambda: Optional[float] = Field(default=None, ge=0)
    batch_size: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = None


class TrainRequest(BaseModel):
    participant_id: str = Field(pattern=PARTICIPANT_PATTERN)
    hyperparams: Optional[TrainHyperparams] = None
    test_fraction: Optional[float] = Field(default=None, ge=0, lt=1)


class TrainJobCreated(BaseModel):
    job_id: str
    status: str = "pending"


class IngestRequest(BaseModel):
    records: list[dict]
    flush: bool = True


def _merge_hyperparams(base: Hyperparams, override: Optional[TrainHyperparams]) -> Hyperparams:
    if override is None:
        return base
    values = vars(base).copy()
    values.update({k: v for k, v in override.model_dump().items() if v is not None})
    return Hyperparams(**values)


class TrainJobs:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._jobs: dict[str, dict] = {}

    def create(self, participant_id: str) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._jobs[job_id] = {
                "job_id": job_id,
                "participant_id": participant_id,
                "status": "pending",
                "error": None,
            }
        return job_id

    def update(self, job_id: str, **fields) -> None:
        with self._lock:
            self._jobs[job_id].update(fields)

    def get(self, job_id: str) -> Optional[dict]:
        with self._lock:
            job = self._jobs.get(job_id)
            return dict(job) if job else None


def create_app(cfg: Optional[Config] = None, runtime: Optional[Runtime] = None) -> FastAPI:
    """Build the service around a runtime (a fresh one unless provided)."""
    owns_runtime = runtime is None
    rt = runtime or Runtime(cfg or Config())
    jobs = TrainJobs()
    executor = ThreadPoolExecutor(max_workers=8, thread_name_prefix="svc")

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        executor.shutdown(wait=False)
        if owns_runtime:
            rt.close()

    app = FastAPI(title="emosense", lifespan=lifespan)
    app.state.runtime = rt
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        # contract is 400 with field errors, not FastAPI's default 422
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/api/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/api/sessions", response_model=SessionCreated, status_code=202)
    def create_session(req: SessionCreateRequest) -> SessionCreated:
        if not rt.registry.exists(req.participant_id):
            raise HTTPException(404, f"no trained model for participant {req.participant_id!r}")
        if req.regime is not None and req.regime not in rt.cfg.regimes:
            raise HTTPException(400, f"unknown regime {req.regime!r}; have {sorted(rt.cfg.regimes)}")
        session = rt.new_session(req.participant_id, req.window_s, req.regime)

        def run() -> None:
            try:
                rt.complete_session(session)
            except Exception as exc:  # the session record carries the failure
                log.warning("session %s failed: %s", session.session_id, exc)

        executor.submit(run)
        return SessionCreated(session_id=session.session_id)

    @app.get("/api/sessions")
    def list_sessions(limit: int = 50) -> dict:
        return {"sessions": [s.to_dict() for s in rt.sessions.recent(limit)]}

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        session = rt.sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return session.to_dict()

    @app.post("/api/train", response_model=TrainJobCreated, status_code=202)
    def start_training(req: TrainRequest) -> TrainJobCreated:
        hp = _merge_hyperparams(rt.cfg.hyperparams, req.hyperparams)
        job_id = jobs.create(req.participant_id)

        def run() -> None:
            jobs.update(job_id, status="running")
            try:
                report = rt.train_participant(req.participant_id, hp, req.test_fraction)
                jobs.update(job_id, status="done", accuracy=report.accuracy)
            except EmptyDatasetError as exc:
                jobs.update(job_id, status="failed", error=str(exc))
            except Exception as exc:
                log.exception("training job %s failed", job_id)
                jobs.update(job_id, status="failed", error=str(exc))

        executor.submit(run)
        return TrainJobCreated(job_id=job_id)

    @app.get("/api/train/{job_id}")
    def get_training_job(job_id: str) -> dict:
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown training job {job_id!r}")
        return job

    @app.get("/api/model/{participant_id}/metrics")
    def get_metrics(participant_id: str) -> dict:
        doc = rt.load_metrics(participant_id)
        if doc is None:
            raise HTTPException(404, f"no trained model metrics for {participant_id!r}")
        return doc

    @app.post("/api/ingest")
    def ingest(req: IngestRequest) -> dict:
        published = rt.ingest(req.records, flush=req.flush)
        return {"published": published}

    @app.get("/api/latency")
    def latency() -> dict:
        try:
            return {
                "including_window": rt.latency(exclude_window=False),
                "excluding_window": rt.latency(exclude_window=True),
            }
        except EmptyStatsError:
            raise HTTPException(404, "no completed sessions yet")

    dist = Path(__file__).resolve().parent.parent.parent / "frontend" / "dist"
    if dist.is_dir():
        app.mount("/", StaticFiles(directory=dist, html=True), name="ui")

    return app
