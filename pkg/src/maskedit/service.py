"""HTTP editing service.

Endpoints:
  GET  /v1/health  -> status, model hash, resolution
  POST /v1/edit    -> run one edit; images travel as base64 PNG, masks as
                      run-length JSON ({"w", "h", "runs"} starting with a
                      0-run). Responses are deterministic for a fixed
                      (model, request) pair.
"""

import base64
import binascii
import io
import time
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .data import image_from_png
from .errors import InvalidRequest, MaskEmpty, ModelNotLoaded
from .masks import BinaryMask, MaskRLE, rle_decode, rle_encode

MAX_BODY_BYTES = 4 * 1024 * 1024
RESOLUTION = 64


class EditRequest(BaseModel):
    scene_png: str = Field(description="base64 PNG, 64x64 RGB")
    mask_rle: dict = Field(description='{"w", "h", "runs"}; first run counts zeros')
    instruction: str = Field(min_length=1, max_length=500)
    subject_png: Optional[str] = None
    steps: int = Field(default=10, ge=1, le=200)
    seed: int = Field(default=0, ge=0, lt=2 ** 31)


def _decode_png_b64(b64: str, field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise InvalidRequest(f"{field}: invalid base64") from exc
    try:
        img = image_from_png(io.BytesIO(raw))
    except Exception as exc:
        raise InvalidRequest(f"{field}: not a decodable PNG") from exc
    if img.shape != (RESOLUTION, RESOLUTION, 3):
        raise InvalidRequest(
            f"{field}: expected {RESOLUTION}x{RESOLUTION} RGB, got {img.shape}")
    return img


def _encode_png_b64(img: np.ndarray) -> str:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_mask(payload: dict) -> BinaryMask:
    try:
        rle = MaskRLE.from_json_obj(payload)
        mask = rle_decode(rle)
    except Exception as exc:
        raise InvalidRequest(f"mask_rle: {exc}") from exc
    if mask.width != RESOLUTION or mask.height != RESOLUTION:
        raise InvalidRequest(f"mask_rle: expected {RESOLUTION}x{RESOLUTION}")
    if mask.data.sum() == 0:
        raise MaskEmpty("mask selects no pixels")
    return mask


def create_app(pipeline=None) -> FastAPI:
    """App factory; `pipeline` may be None (health reports not-loaded,
    edits return 503)."""
    from .evaluation import pipeline_hash

    app = FastAPI(title="maskedit", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.pipeline = pipeline
    app.state.model_hash = pipeline_hash(pipeline) if pipeline is not None else None

    @app.exception_handler(InvalidRequest)
    async def _invalid(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(MaskEmpty)
    async def _empty(request, exc):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(ModelNotLoaded)
    async def _unloaded(request, exc):
        return JSONResponse(status_code=503, content={"error": str(exc)})

    @app.middleware("http")
    async def _limit_body(request: Request, call_next):
        cl = request.headers.get("content-length")
        if cl is not None and int(cl) > MAX_BODY_BYTES:
            return JSONResponse(status_code=413,
                                content={"error": "request body too large"})
        return await call_next(request)

    @app.get("/v1/health")
    async def health():
        return {
            "status": "ok" if app.state.pipeline is not None else "no_model",
            "model_hash": app.state.model_hash,
            "resolution": RESOLUTION,
        }

    @app.post("/v1/edit")
    async def edit(req: EditRequest):
        if app.state.pipeline is None:
            raise ModelNotLoaded("no model is loaded")
        t0 = time.monotonic()
        scene = _decode_png_b64(req.scene_png, "scene_png")
        subject = (_decode_png_b64(req.subject_png, "subject_png")
                   if req.subject_png else None)
        mask = _decode_mask(req.mask_rle)
        t1 = time.monotonic()
        out, response_text = app.state.pipeline.edit(
            scene, mask, req.instruction, x2=subject,
            steps=req.steps, seed=req.seed)
        t2 = time.monotonic()
        predicted = app.state.pipeline.predict_mask(scene, mask,
                                                    steps=req.steps, seed=req.seed)
        return {
            "edited_png": _encode_png_b64(out),
            "response_text": response_text,
            "predicted_full_mask": rle_encode(predicted).to_json_obj(),
            "model_hash": app.state.model_hash,
            "timings_ms": {
                "decode": round(1000 * (t1 - t0), 3),
                "edit": round(1000 * (t2 - t1), 3),
            },
        }

    return app


def load_app_from_checkpoint(path) -> FastAPI:
    from .training import load_checkpoint

    pipeline, _, _, _ = load_checkpoint(path)
    pipeline.eval()
    return create_app(pipeline)
