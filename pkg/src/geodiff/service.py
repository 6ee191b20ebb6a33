"""HTTP/JSON service the browser UI talks to.

Images and masks travel as base64 PNG, depth as base64 PFM.  Sessions
invert once in the background; previews are geometry-only and fast; edits
run as jobs polled by id.  Unknown ids give 404, invalid payloads 422, and
submitting an edit while the session is still inverting gives 409.
"""

from __future__ import annotations

import base64
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import report
from .diffnet import DenoiseUNet, NoiseSchedule
from .geometry import EditTransform, GeometryError, build_field, mask_algebra
from .jobs import JobStore, SessionBusyError, UnknownIdError
from .pipeline import EditConfig, PipelineError, resolve_depth
from .raster import load_image, load_mask, load_pfm, save_image


def _png_to_array(b64: str, as_mask: bool = False) -> np.ndarray:
    try:
        raw = base64.b64decode(b64)
    except Exception:
        raise HTTPException(422, "invalid base64 payload")
    with tempfile.NamedTemporaryFile(suffix=".png") as f:
        f.write(raw)
        f.flush()
        try:
            return load_mask(f.name) if as_mask else load_image(f.name)
        except Exception as exc:
            raise HTTPException(422, f"cannot decode PNG: {exc}")


def _pfm_to_array(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64)
    except Exception:
        raise HTTPException(422, "invalid base64 payload")
    with tempfile.NamedTemporaryFile(suffix=".pfm") as f:
        f.write(raw)
        f.flush()
        try:
            return load_pfm(f.name)
        except Exception as exc:
            raise HTTPException(422, f"cannot decode PFM: {exc}")


def _array_to_png_b64(arr: np.ndarray) -> str:
    with tempfile.NamedTemporaryFile(suffix=".png") as f:
        save_image(f.name, arr)
        return base64.b64encode(Path(f.name).read_bytes()).decode("ascii")


class SessionRequest(BaseModel):
    image: str                 # base64 PNG
    mask: str                  # base64 PNG
    depth: Optional[str] = None  # base64 PFM
    steps: int = 50


class PreviewRequest(BaseModel):
    transform: dict


class EditRequest(BaseModel):
    config: dict


def create_app(model: DenoiseUNet, schedule: NoiseSchedule,
               max_workers: int = 2, frontend_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="geodiff", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    store = JobStore(model, schedule, max_workers=max_workers)
    app.state.store = store

    @app.post("/sessions")
    def create_session(req: SessionRequest):
        image = _png_to_array(req.image)
        mask = _png_to_array(req.mask, as_mask=True)
        if mask.shape[:2] != image.shape[:2]:
            raise HTTPException(422, "mask and image sizes differ")
        depth = _pfm_to_array(req.depth) if req.depth else None
        if depth is not None and depth.shape != image.shape[:2]:
            raise HTTPException(422, "depth and image sizes differ")
        session = store.create_session(image, mask, depth, steps=req.steps)
        return {"session_id": session.id}

    @app.get("/sessions/{session_id}")
    def session_state(session_id: str):
        session = _get_session(session_id)
        return {"session_id": session.id, "state": session.state,
                "error": session.error, "inversions": session.inversion_count}

    @app.post("/sessions/{session_id}/preview")
    def preview(session_id: str, req: PreviewRequest):
        session = _get_session(session_id)
        try:
            transform = EditTransform.from_json(req.transform)
            h, w = session.image.shape[:2]
            depth = resolve_depth(transform, h, w, session.depth)
            field = build_field(transform, h, w, depth)
            masks = mask_algebra(session.mask, field)
        except (GeometryError, PipelineError, ValueError, KeyError) as exc:
            raise HTTPException(422, f"invalid transform: {exc}")
        # orange marks pixels the edit will have to inpaint; an identity
        # transform leaves the image untouched
        overlay = report.mask_overlay(session.image, masks.m_disocc)
        return {
            "warp_overlay": _array_to_png_b64(overlay),
            "m_obj_t": _array_to_png_b64(masks.m_obj_t[:, :, None]),
            "m_disocc": _array_to_png_b64(masks.m_disocc[:, :, None]),
        }

    @app.post("/sessions/{session_id}/edits")
    def submit_edit(session_id: str, req: EditRequest):
        _get_session(session_id)
        try:
            config = EditConfig.from_json(req.config)
        except (PipelineError, GeometryError, ValueError, KeyError, TypeError) as exc:
            raise HTTPException(422, f"invalid config: {exc}")
        try:
            job = store.submit_edit(session_id, config)
        except SessionBusyError as exc:
            raise HTTPException(409, str(exc))
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def job_state(job_id: str):
        job = _get_job(job_id)
        return {
            "job_id": job.id,
            "state": job.state,
            "progress": job.progress,
            "error": job.error,
            "loss_curves": job.loss_records,
            "w_remove": [{"step": r["step"], "w_remove": r["w_remove"]}
                         for r in job.step_records],
        }

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: str):
        job = _get_job(job_id)
        if job.state == "failed":
            raise HTTPException(409, f"job failed: {job.error}")
        if job.state != "done" or job.result is None:
            raise HTTPException(409, f"job not finished (state {job.state})")
        res = job.result
        we = res.warp_error_edited
        return {
            "edited": _array_to_png_b64(res.edited),
            "baseline": _array_to_png_b64(res.baseline),
            "warp_error": None if we != we else we,
            "warp_error_input": (None if res.warp_error_input != res.warp_error_input
                                 else res.warp_error_input),
            "diagnostics": {
                "attention": [{"step": s, "block": b}
                              for (s, b) in sorted(res.attention_summaries)],
            },
        }

    @app.get("/jobs/{job_id}/attention/{step}/{block}")
    def job_attention(job_id: str, step: int, block: str):
        job = _get_job(job_id)
        if job.result is None:
            raise HTTPException(409, "job not finished")
        grid = job.result.attention_summaries.get((step, block))
        if grid is None:
            raise HTTPException(404, f"no attention record for step {step}, block {block}")
        png = report.attention_heatmap_png(grid, title=f"step {step} {block}")
        return Response(content=png, media_type="image/png")

    def _get_session(session_id: str):
        try:
            return store.get_session(session_id)
        except UnknownIdError:
            raise HTTPException(404, f"unknown session {session_id}")

    def _get_job(job_id: str):
        try:
            return store.get_job(job_id)
        except UnknownIdError:
            raise HTTPException(404, f"unknown job {job_id}")

    if frontend_dir and Path(frontend_dir).is_dir():
        app.mount("/app", StaticFiles(directory=frontend_dir, html=True), name="app")

    return app
