"""HTTP adapter over the adaptive engine.

Sessions live in memory. Requests for one session are serialized by a
per-session lock, so a result submission is an atomic read-modify-write;
different sessions proceed in parallel. Raw scores are scaled server-side
with the model's stored bounds.

    POST /sessions                  {"metric"}               -> {session_id, metric, next_test}
    POST /sessions/{id}/results     {"test_id", "raw_score"} -> {theta, se, next_test, cumulative_minutes}
    GET  /sessions/{id}                                      -> session summary
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .adaptive import Session, record_result, start_session
from .data import SavedModel
from .errors import BetacatError, DuplicateTestError, UnknownTestError

__all__ = ["create_app"]


class CreateSession(BaseModel):
    metric: str = "info"


class SubmitResult(BaseModel):
    test_id: str
    raw_score: float = Field(allow_inf_nan=False)


@dataclass
class _Entry:
    session: Session
    last_seen: float
    lock: threading.Lock = field(default_factory=threading.Lock)


def _summary(session: Session) -> dict:
    return {
        "session_id": session.session_id,
        "metric": session.metric.value,
        "theta": session.current_theta.value,
        "se": session.current_theta.se,
        "cumulative_minutes": session.cumulative_minutes,
        "next_test": session.next_test(),
        "administered": [
            {
                "test_id": a.test_id,
                "score": a.score,
                "cumulative_minutes": a.cumulative_minutes,
                "theta": a.theta,
                "se": a.se,
            }
            for a in session.administered
        ],
    }


def _http_error(exc: BetacatError) -> HTTPException:
    status = 409 if isinstance(exc, DuplicateTestError) else 422 if exc.kind == "input" else 500
    return HTTPException(status_code=status, detail={"code": exc.code, "message": str(exc)})


def create_app(
    model: SavedModel,
    idle_timeout: float = 1800.0,
    clock: Callable[[], float] = time.monotonic,
) -> FastAPI:
    """Build the app. Sessions idle for more than ``idle_timeout`` seconds are dropped."""
    app = FastAPI(title="betacat", description="Adaptive test recommendation sessions")
    sessions: dict[str, _Entry] = {}

    @app.exception_handler(RequestValidationError)
    def malformed(request: Request, exc: RequestValidationError) -> JSONResponse:
        # the default handler echoes the input, which fails on NaN
        errors = [{"loc": list(e.get("loc", ())), "msg": e.get("msg", "")} for e in exc.errors()]
        return JSONResponse(status_code=422, content={"detail": {"code": "MALFORMED_REQUEST", "errors": errors}})
    registry = threading.Lock()

    def expire(now: float) -> None:
        for sid in [s for s, e in sessions.items() if now - e.last_seen > idle_timeout]:
            del sessions[sid]

    def lookup(session_id: str) -> _Entry:
        now = clock()
        with registry:
            expire(now)
            entry = sessions.get(session_id)
            if entry is None:
                raise HTTPException(404, detail={"code": "UNKNOWN_SESSION", "message": session_id})
            entry.last_seen = now
            return entry

    @app.post("/sessions", status_code=201)
    def create(body: CreateSession) -> dict:
        try:
            session = start_session(model, body.metric)
        except BetacatError as exc:
            raise _http_error(exc) from None
        with registry:
            expire(clock())
            sessions[session.session_id] = _Entry(session, clock())
        return {"session_id": session.session_id, "metric": session.metric.value, "next_test": session.next_test()}

    @app.post("/sessions/{session_id}/results")
    def submit(session_id: str, body: SubmitResult) -> dict:
        entry = lookup(session_id)
        with entry.lock:
            session = entry.session
            try:
                if body.test_id in session.administered_ids:
                    raise DuplicateTestError(f"test {body.test_id!r} was already administered")
                if body.test_id not in session.eligible:
                    raise UnknownTestError(f"test {body.test_id!r} is not in the model")
                record_result(session, body.test_id, model.scale(body.test_id, body.raw_score))
            except BetacatError as exc:
                raise _http_error(exc) from None
            return {
                "theta": session.current_theta.value,
                "se": session.current_theta.se,
                "next_test": session.next_test(),
                "cumulative_minutes": session.cumulative_minutes,
            }

    @app.get("/sessions/{session_id}")
    def summary(session_id: str) -> dict:
        entry = lookup(session_id)
        with entry.lock:
            return _summary(entry.session)

    return app
