"""Stateless HTTP service over the edit pipeline.

POST /edit runs a full edit from a multipart upload, POST /invert runs
stage 1 alone, POST /directions generates caption sets and a direction
from text only; GET /health and GET /config report what is loaded. Backend
access is serialized per suite instance; value types cross freely.
"""

from __future__ import annotations

import base64
import dataclasses
import io
import json
import threading
from typing import Optional, Sequence

import numpy as np
from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from . import __version__
from .backends.base import BackendSuite
from .config import RuntimeConfig
from .pipeline import (
    ConfigValidationError,
    EditConfig,
    EditRequest,
    PipelineError,
    direction_stats,
    edit,
    generate_directions,
    invert_only,
)
from .prompting import CaptionBundle, FewShotExample, PromptError


def image_to_b64(image: Image.Image) -> str:
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def b64_to_image(data: str) -> Image.Image:
    return Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB")


def _bundle_json(bundle: CaptionBundle) -> dict:
    return {
        "before": list(bundle.before),
        "after": list(bundle.after),
        "locked_first_before": bundle.locked_first_before,
        "lock_source": bundle.lock_source,
    }


def _request_error(message: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"stage": "request", "error": message})


def _parse_config_overrides(raw: Optional[str], seed: Optional[int] = None) -> EditConfig:
    overrides = {}
    if raw:
        overrides = json.loads(raw)
        if not isinstance(overrides, dict):
            raise ConfigValidationError("config overrides must be a JSON object")
    if seed is not None:
        overrides.setdefault("rng_seed", seed)
    return EditConfig(**overrides)


def _read_image(upload_bytes: bytes) -> Image.Image:
    try:
        return Image.open(io.BytesIO(upload_bytes)).convert("RGB")
    except UnidentifiedImageError as exc:
        raise ConfigValidationError(f"uploaded file is not a decodable image: {exc}") from exc


def create_app(
    suite: BackendSuite,
    config: Optional[RuntimeConfig] = None,
    pool: Sequence[FewShotExample] = (),
) -> FastAPI:
    app = FastAPI(title="instructedit", version=__version__)
    backend_lock = threading.Lock()  # one in-flight call per adapter instance

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return _request_error(str(exc.errors()))

    @app.exception_handler(ConfigValidationError)
    async def invalid_config(request: Request, exc: ConfigValidationError):
        return _request_error(str(exc))

    @app.exception_handler(PromptError)
    async def invalid_prompt_args(request: Request, exc: PromptError):
        return _request_error(str(exc))

    @app.exception_handler(json.JSONDecodeError)
    async def invalid_json(request: Request, exc: json.JSONDecodeError):
        return _request_error(f"invalid JSON: {exc}")

    @app.exception_handler(PipelineError)
    async def pipeline_failure(request: Request, exc: PipelineError):
        return JSONResponse(status_code=500, content={"stage": exc.stage, "error": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__, "backends": dict(suite.identifiers)}

    @app.get("/config")
    def get_config():
        return {
            "runtime": dataclasses.asdict(config) if config is not None else None,
            "edit_defaults": dataclasses.asdict(EditConfig()),
            "guidance": {"edit": suite.guidance_edit, "invert": suite.guidance_invert},
            "pool_examples": len(pool),
        }

    @app.post("/edit")
    def post_edit(
        image: UploadFile = File(...),
        instruction: str = Form(...),
        config_overrides: Optional[str] = Form(default=None, alias="config"),
        seed: Optional[int] = Form(default=None),
    ):
        knobs = _parse_config_overrides(config_overrides, seed)
        source = _read_image(image.file.read())
        request = EditRequest(image=source, instruction=instruction, knobs=knobs)
        with backend_lock:
            result = edit(request, suite, pool)
        return {
            "edited_image": image_to_b64(result.edited_image),
            "reconstruction": image_to_b64(result.inverted_reconstruction),
            "caption_used": result.caption_used,
            "bundle": _bundle_json(result.bundle),
            "direction": direction_stats(result.direction),
            "provenance": result.provenance,
        }

    @app.post("/invert")
    def post_invert(
        image: UploadFile = File(...),
        caption: Optional[str] = Form(default=None),
        ddim_steps: int = Form(default=100),
    ):
        source = _read_image(image.file.read())
        with backend_lock:
            noise, reconstruction, caption_used = invert_only(source, caption, suite, ddim_steps)
        return {
            "reconstruction": image_to_b64(reconstruction),
            "caption_used": caption_used,
            "noise_latent": {
                "shape": list(noise.latent.shape),
                "timestep": noise.timestep,
                "dtype": "float32",
                "data": base64.b64encode(
                    np.ascontiguousarray(noise.latent, dtype="<f4").tobytes()
                ).decode("ascii"),
            },
        }

    @app.post("/directions")
    async def post_directions(request: Request):
        payload = await request.json()
        if not isinstance(payload, dict) or "instruction" not in payload:
            raise ConfigValidationError("body must be a JSON object with an 'instruction' field")
        knobs = EditConfig(**payload.get("config", {}))
        with backend_lock:
            bundle, direction, completion = generate_directions(
                payload["instruction"], knobs, suite, pool, caption=payload.get("caption")
            )
        return {
            "bundle": _bundle_json(bundle),
            "direction": direction_stats(direction),
            "completion": completion,
        }

    return app
