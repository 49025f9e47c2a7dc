"""HTTP session service for human-in-the-loop refinement.

Sessions are in-memory and ephemeral (idle-evicted); every mutation is
serialized per session and rejected with 409 while another refinement
for the same session is in flight. Slices render deterministically from
the session state: CT with a fixed [-1, 1] display window, PET clipped
at its 99th percentile, probabilities and masks as 8-bit grayscale.
"""

from __future__ import annotations

import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .clicks import Click, NEGATIVE, POSITIVE
from .errors import DataError
from .metrics import evaluate_masks
from .nn.unet import load_checkpoint
from .session import (
    EnsembleDriver,
    SessionState,
    TwoStageDriver,
    apply_click,
    start_session,
)
from .volume import CaseRecord, load_case, load_manifest

IDLE_EVICT_SECONDS = 30 * 60


class ClickBody(BaseModel):
    i: int
    j: int
    k: int
    label: str


class SessionBody(BaseModel):
    case_id: str
    model: str = "single"


@dataclass
class _Session:
    state: SessionState
    model: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    created: float = field(default_factory=time.monotonic)
    last_access: float = field(default_factory=time.monotonic)
    metric_history: list[dict] = field(default_factory=list)

    @property
    def version(self) -> int:
        return self.state.t


def _session_metrics_row(state: SessionState, changed: int) -> dict | None:
    if state.case.gtv is None:
        return None
    report = evaluate_masks(state.current_mask(), state.case.gtv, changed)
    return {"t": state.t, **report.to_dict()}


def _render_slice(case: CaseRecord, state: SessionState, axis: str, index: int, layer: str) -> bytes | None:
    axes = {"x": 0, "y": 1, "z": 2}
    if axis not in axes or layer not in ("ct", "pet", "prob", "mask"):
        return None
    ax = axes[axis]
    dims = case.grid.dims
    if not 0 <= index < dims[ax]:
        return None
    if layer == "ct":
        vol = np.clip(case.ct.values, -200.0, 200.0) / 200.0
        img = ((vol + 1.0) / 2.0 * 255.0).astype(np.uint8)
    elif layer == "pet":
        vals = case.pet.values.astype(np.float64)
        hi = np.percentile(vals, 99.0)
        lo = vals.min()
        scale = (hi - lo) if hi > lo else 1.0
        img = (np.clip((vals - lo) / scale, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif layer == "prob":
        img = (state.driver_state.prob * 255.0).astype(np.uint8)
    else:
        img = state.current_mask().values * np.uint8(255)
    plane = np.take(img, index, axis=ax)
    buf = io.BytesIO()
    Image.fromarray(plane, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    data_root,
    drivers: dict | None = None,
    models_dir=None,
    ensemble: bool = False,
    idle_seconds: float = IDLE_EVICT_SECONDS,
) -> FastAPI:
    """Build the service; drivers may be passed directly (tests) or loaded
    from a checkpoint directory with standard.ckpt/refine.ckpt files."""
    root = Path(data_root)
    if drivers is None:
        drivers = {}
        if models_dir is not None:
            drivers.update(_load_drivers(Path(models_dir), ensemble))

    app = FastAPI(title="interactive refinement service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    sessions: dict[str, _Session] = {}
    cases: dict[str, CaseRecord] = {}
    sessions_guard = threading.Lock()

    def _get_case(case_id: str) -> CaseRecord | None:
        if case_id not in cases:
            case_dir = root / case_id
            if not (case_dir / "ct.ivol").is_file():
                return None
            cases[case_id] = load_case(case_dir)
        return cases[case_id]

    def _evict_idle() -> None:
        now = time.monotonic()
        with sessions_guard:
            stale = [sid for sid, s in sessions.items() if now - s.last_access > idle_seconds]
            for sid in stale:
                del sessions[sid]

    def _get_session(session_id: str) -> _Session | None:
        _evict_idle()
        sess = sessions.get(session_id)
        if sess is not None:
            sess.last_access = time.monotonic()
        return sess

    @app.get("/api/volumes")
    def list_volumes():
        try:
            entries = load_manifest(root)
        except DataError:
            return []
        out = []
        for e in entries:
            case_dir = root / e["id"]
            dims = spacing = None
            case = _get_case(e["id"])
            if case is not None:
                dims = list(case.grid.dims)
                spacing = list(case.grid.spacing)
            out.append(
                {
                    "case_id": e["id"],
                    "fold": e.get("fold"),
                    "dims": dims,
                    "spacing": spacing,
                    "has_gtv": (case_dir / "gtv.ivol").is_file(),
                }
            )
        return out

    @app.post("/api/sessions", status_code=201)
    def create_session(body: SessionBody):
        _evict_idle()
        if body.model not in drivers:
            return JSONResponse({"error": f"model {body.model!r} not loaded"}, status_code=503)
        case = _get_case(body.case_id)
        if case is None:
            return JSONResponse({"error": f"unknown case {body.case_id!r}"}, status_code=404)
        state = start_session(drivers[body.model], case)
        sess = _Session(state, body.model)
        row = _session_metrics_row(state, 0)
        if row is not None:
            sess.metric_history.append(row)
        sid = uuid.uuid4().hex
        with sessions_guard:
            sessions[sid] = sess
        return {
            "session_id": sid,
            "dims": list(case.grid.dims),
            "spacing": list(case.grid.spacing),
            "t": state.t,
        }

    @app.get("/api/sessions/{session_id}/slice")
    def get_slice(session_id: str, axis: str = "z", index: int = 0, layer: str = "ct"):
        sess = _get_session(session_id)
        if sess is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        png = _render_slice(sess.state.case, sess.state, axis, index, layer)
        if png is None:
            return JSONResponse({"error": "bad axis, index, or layer"}, status_code=404)
        return Response(content=png, media_type="image/png")

    @app.post("/api/sessions/{session_id}/clicks")
    def post_click(session_id: str, body: ClickBody):
        sess = _get_session(session_id)
        if sess is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        if body.label not in (POSITIVE, NEGATIVE):
            return JSONResponse({"error": f"bad label {body.label!r}"}, status_code=400)
        dims = sess.state.grid.dims
        coord = (body.i, body.j, body.k)
        if any(not 0 <= coord[a] < dims[a] for a in range(3)):
            return JSONResponse({"error": f"voxel {coord} out of bounds"}, status_code=400)
        if not sess.lock.acquire(blocking=False):
            return JSONResponse({"error": "refinement in flight"}, status_code=409)
        try:
            click = Click(coord, body.label, sess.state.t + 1)
            sess.state = apply_click(drivers[sess.model], sess.state, click)
            changed = sess.state.changed_history[-1]
            row = _session_metrics_row(sess.state, changed)
            resp = {"t": sess.state.t, "changed_voxels": changed}
            if row is not None:
                sess.metric_history.append(row)
                resp["dsc"] = row["dsc"]
            return resp
        finally:
            sess.lock.release()

    @app.post("/api/sessions/{session_id}/reset")
    def reset_session(session_id: str):
        sess = _get_session(session_id)
        if sess is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with sess.lock:
            sess.state = start_session(drivers[sess.model], sess.state.case)
            sess.metric_history.clear()
            row = _session_metrics_row(sess.state, 0)
            if row is not None:
                sess.metric_history.append(row)
        return {"t": sess.state.t}

    @app.get("/api/sessions/{session_id}/metrics")
    def get_metrics(session_id: str):
        sess = _get_session(session_id)
        if sess is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        if sess.state.case.gtv is None:
            return JSONResponse({"error": "case has no ground truth"}, status_code=409)
        return {"rows": sess.metric_history}

    return app


def _load_drivers(models_dir: Path, ensemble: bool) -> dict:
    drivers = {}
    std_path = models_dir / "standard.ckpt"
    ref_path = models_dir / "refine.ckpt"
    if std_path.is_file() and ref_path.is_file():
        standard, _ = load_checkpoint(std_path)
        refiner, _ = load_checkpoint(ref_path)
        drivers["single"] = TwoStageDriver(standard, refiner)
    if ensemble:
        members = []
        for fold_dir in sorted(models_dir.glob("fold*")):
            std, _ = load_checkpoint(fold_dir / "standard.ckpt")
            ref, _ = load_checkpoint(fold_dir / "refine.ckpt")
            members.append(TwoStageDriver(std, ref))
        if members:
            drivers["ensemble"] = EnsembleDriver(members)
    return drivers


def serve(data_root, models_dir, port: int = 8000, ensemble: bool = False) -> None:
    import uvicorn

    app = create_app(data_root, models_dir=models_dir, ensemble=ensemble)
    uvicorn.run(app, host="127.0.0.1", port=port)
