"""HTTP session service: the engine's query loop exposed to a human analyst.

One session per uploaded dataset. The protocol is strictly alternating:
GET /query hands out (and pins) the next instance, POST /label answers it.
Re-GET while a query is pending returns the identical body, so a flaky
client can always resynchronize. Sessions live in memory; an optional
snapshot directory receives an append-only JSON line per answered query so
a restarted service can replay a session through the engine.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from email.parser import BytesParser
from email.policy import HTTP
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel
from typing import Literal

from . import engine, policy
from .data import DataError, Label, RawDataset, load_csv_text

logger = logging.getLogger(__name__)

MAX_UPLOAD_BYTES = 50 * 1024 * 1024
MODEL_SUFFIX = ".model"


class LabelBody(BaseModel):
    instance_index: int
    answer: Literal["anomaly", "normal"]


@dataclass
class SessionRecord:
    record_id: str
    session: engine.QuerySession
    raw_X: np.ndarray
    feature_names: tuple[str, ...]
    model_id: str
    created: float
    lock: threading.Lock = field(default_factory=threading.Lock)
    pending_body: dict | None = None

    @property
    def status(self) -> str:
        if self.pending_body is not None:
            return "awaiting_label"
        if self.session.exhausted:
            return "exhausted"
        return "ready"


class ModelRegistry:
    """Lazy-loading cache of policy files in a directory (id = file stem)."""

    def __init__(self, model_dir: str | Path | None):
        self.model_dir = Path(model_dir) if model_dir else None
        self._cache: dict[str, policy.PolicyModel] = {}

    def get(self, model_id: str) -> policy.PolicyModel | None:
        if model_id in self._cache:
            return self._cache[model_id]
        if self.model_dir is None:
            return None
        path = self.model_dir / f"{model_id}{MODEL_SUFFIX}"
        if not path.is_file():
            return None
        model = policy.load_model(path)
        self._cache[model_id] = model
        return model

    def put(self, model_id: str, model: policy.PolicyModel) -> None:
        self._cache[model_id] = model


def _parse_multipart(body: bytes, content_type: str) -> dict[str, bytes]:
    """Minimal multipart/form-data parser (python-multipart not required)."""
    head = f"Content-Type: {content_type}\r\n\r\n".encode()
    msg = BytesParser(policy=HTTP).parsebytes(head + body)
    if not msg.is_multipart():
        raise ValueError("expected multipart/form-data body")
    fields: dict[str, bytes] = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            fields[name] = part.get_payload(decode=True) or b""
    return fields


def create_app(
    model_dir: str | Path | None = None,
    snapshot_dir: str | Path | None = None,
    default_budget: int = engine.DEFAULT_BUDGET,
) -> FastAPI:
    """Build the service; env vars MODEL_DIR / SNAPSHOT_DIR apply when the
    arguments are omitted."""
    registry = ModelRegistry(model_dir or os.environ.get("MODEL_DIR"))
    snapshots = snapshot_dir or os.environ.get("SNAPSHOT_DIR")
    if snapshots:
        Path(snapshots).mkdir(parents=True, exist_ok=True)

    app = FastAPI(title="anoquery session service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    sessions: dict[str, SessionRecord] = {}
    app.state.registry = registry
    app.state.sessions = sessions

    def err(status: int, detail: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"detail": detail})

    def snapshot(rec: SessionRecord, index: int, answer: str) -> None:
        if not snapshots:
            return
        line = json.dumps(
            {"session": rec.record_id, "model": rec.model_id, "index": index, "answer": answer}
        )
        with open(Path(snapshots) / f"{rec.record_id}.jsonl", "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        body = await request.body()
        if len(body) > MAX_UPLOAD_BYTES:
            return err(413, f"upload exceeds {MAX_UPLOAD_BYTES} bytes")
        content_type = request.headers.get("content-type", "")
        if not content_type.startswith("multipart/"):
            return err(400, "expected multipart/form-data with a 'dataset' file")
        try:
            fields = _parse_multipart(body, content_type)
        except Exception as exc:
            return err(400, f"bad multipart body: {exc}")
        if "dataset" not in fields or not fields["dataset"].strip():
            return err(400, "missing or empty 'dataset' file field")

        model_id = fields.get("model_id", b"").decode() or request.query_params.get(
            "model_id", "default"
        )
        model = registry.get(model_id)
        if model is None:
            return err(404, f"unknown model id {model_id!r}")
        budget_raw = fields.get("budget", b"").decode() or request.query_params.get(
            "budget", str(default_budget)
        )
        try:
            budget = int(budget_raw)
            if budget < 0:
                raise ValueError
        except ValueError:
            return err(400, f"budget: expected a nonnegative integer, got {budget_raw!r}")

        try:
            text = fields["dataset"].decode("utf-8")
        except UnicodeDecodeError as exc:
            return err(400, f"dataset is not UTF-8 text: {exc}")
        header = text.split("\n", 1)[0]
        label_col = "label" if "label" in [h.strip() for h in header.split(",")] else None
        try:
            raw = load_csv_text(text, name="upload", label_column=label_col)
        except DataError as exc:
            return err(400, str(exc))

        # the analyst is the label source: any uploaded labels are ignored
        dataset = RawDataset(
            name=raw.name, X=raw.X, y=None, feature_names=raw.feature_names
        )
        session = engine.session_open(dataset, model, budget=budget)
        rec = SessionRecord(
            record_id=uuid.uuid4().hex,
            session=session,
            raw_X=raw.X,
            feature_names=raw.feature_names,
            model_id=model_id,
            created=time.time(),
        )
        sessions[rec.record_id] = rec
        logger.info("session %s opened: n=%d d=%d budget=%d", rec.record_id, raw.n, raw.d, budget)
        return {
            "session_id": rec.record_id,
            "n": raw.n,
            "d": raw.d,
            "budget": budget,
        }

    @app.get("/sessions/{session_id}/query")
    def get_query(session_id: str):
        rec = sessions.get(session_id)
        if rec is None:
            return err(404, f"unknown session {session_id!r}")
        with rec.lock:
            if rec.pending_body is not None:
                return rec.pending_body
            if rec.session.exhausted:
                return err(409, "session exhausted: budget used or all instances queried")
            idx, probs = engine.next_query(rec.session)
            rec.pending_body = {
                "instance_index": idx,
                "raw_features": [float(v) for v in rec.raw_X[idx]],
                "feature_names": list(rec.feature_names),
                "meta_features": [float(v) for v in rec.session.mf.G[idx]],
                "probability": float(probs[idx]),
                "queries_used": rec.session.queries_used,
                "budget": rec.session.budget,
            }
            return rec.pending_body

    @app.post("/sessions/{session_id}/label")
    def post_label(session_id: str, body: LabelBody):
        rec = sessions.get(session_id)
        if rec is None:
            return err(404, f"unknown session {session_id!r}")
        with rec.lock:
            if rec.pending_body is None:
                return err(409, "no query is awaiting a label")
            if body.instance_index != rec.pending_body["instance_index"]:
                return err(
                    409,
                    f"label for instance {body.instance_index} but instance "
                    f"{rec.pending_body['instance_index']} is pending",
                )
            answer = Label.ANOMALY if body.answer == "anomaly" else Label.NORMAL
            engine.submit_label(rec.session, body.instance_index, answer)
            rec.pending_body = None
            snapshot(rec, body.instance_index, body.answer)
            return {
                "curve_point": rec.session.curve[-1],
                "discovered_total": rec.session.discovered_total,
                "queries_used": rec.session.queries_used,
                "status": rec.status,
            }

    @app.get("/sessions/{session_id}/curve")
    def get_curve(session_id: str):
        rec = sessions.get(session_id)
        if rec is None:
            return err(404, f"unknown session {session_id!r}")
        with rec.lock:
            return {
                "curve": list(rec.session.curve),
                "log": [
                    {"index": idx, "answer": answer.name.lower()}
                    for idx, answer in rec.session.query_log
                ],
                "queries_used": rec.session.queries_used,
                "budget": rec.session.budget,
                "discovered_total": rec.session.discovered_total,
                "status": rec.status,
            }

    @app.get("/sessions/{session_id}/export")
    def get_export(session_id: str):
        rec = sessions.get(session_id)
        if rec is None:
            return err(404, f"unknown session {session_id!r}")
        with rec.lock:
            lines = ["index,answer"]
            lines += [f"{idx},{answer.name.lower()}" for idx, answer in rec.session.query_log]
        return PlainTextResponse("\n".join(lines) + "\n", media_type="text/csv")

    return app
