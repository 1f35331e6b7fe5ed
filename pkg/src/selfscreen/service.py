"""Single-selfie screening: in-process (``screen_once``) and over HTTP.

``POST /screen`` takes ``{"image_b64": ...}`` or ``{"description": ...}`` and
returns ``{"label", "p_abnormal", "description", "model_version"}``. Errors
come back as ``{"code", "stage", "message"}`` with status 400, 502 or 500.
``GET /healthz`` reports ``{"status": "ok", "model_version"}``.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from selfscreen import ffnn
from selfscreen.data import Label
from selfscreen.embed import EmbeddingProvider, embed_text
from selfscreen.errors import (
    AuthenticationError,
    ProtocolError,
    ProviderHTTPError,
    StageError,
    TransportError,
    ValidationError,
)
from selfscreen.vlm import Provider, request_description

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScreenResponse:
    label: str  # "normal" | "abnormal"
    p_abnormal: float
    model_version: str
    description: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class Screener:
    """image -> description -> embedding -> head, or description -> embedding -> head."""

    def __init__(
        self,
        params: ffnn.FfnnParams,
        embedder: EmbeddingProvider,
        vlm: Provider | None = None,
        normalize: bool = True,
        model_version: str = "unversioned",
    ):
        self.params = params
        self.embedder = embedder
        self.vlm = vlm
        self.normalize = normalize
        self.model_version = model_version

    @classmethod
    def from_model_file(cls, path: str | Path, embedder: EmbeddingProvider, vlm: Provider | None = None,
                        normalize: bool = True) -> "Screener":
        return cls(ffnn.load_model(path), embedder, vlm, normalize, ffnn.model_version(path))

    def screen(self, image: bytes | str | Path | None = None, description: str | None = None) -> ScreenResponse:
        if (image is None) == (description is None):
            raise ValidationError("supply exactly one of image or description")
        generated = None
        if image is not None:
            if self.vlm is None:
                raise StageError("describe", ValidationError("no VLM provider configured (description-only mode)"))
            try:
                generated = request_description(image, self.vlm).text
            except (OSError, ValidationError, ProtocolError, TransportError, ProviderHTTPError) as exc:
                raise StageError("describe", exc) from exc
            description = generated
        if not description or not description.strip():
            raise ValidationError("description is empty")
        logger.info("screening text digest=%s", hashlib.sha256(description.encode()).hexdigest()[:12])
        try:
            vec = embed_text(description, self.embedder, normalize=self.normalize)
        except Exception as exc:
            raise StageError("embed", exc) from exc
        try:
            p, label = ffnn.screen_vector(self.params, vec.values)
        except Exception as exc:
            raise StageError("classify", exc) from exc
        return ScreenResponse(
            label="abnormal" if label is Label.POSITIVE else "normal",
            p_abnormal=p,
            model_version=self.model_version,
            description=generated,
        )


def screen_once(
    screener: Screener,
    image: bytes | str | Path | None = None,
    text: str | None = None,
) -> ScreenResponse:
    return screener.screen(image=image, description=text)


def _error(status: int, code: str, stage: str | None, message: str) -> JSONResponse:
    return JSONResponse({"code": code, "stage": stage, "message": message}, status_code=status)


def create_app(screener: Screener, max_in_flight: int = 8) -> FastAPI:
    app = FastAPI(title="selfscreen", version=screener.model_version)
    gate = asyncio.Semaphore(max_in_flight)

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "model_version": screener.model_version}

    @app.post("/screen")
    async def screen(request: Request):
        raw = await request.body()
        if not raw.strip():
            return _error(400, "empty_body", None, "request body is empty")
        try:
            body = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _error(400, "invalid_json", None, "request body is not valid JSON")
        if not isinstance(body, dict):
            return _error(400, "invalid_body", None, "request body must be a JSON object")
        image_b64, text = body.get("image_b64"), body.get("description")
        if (image_b64 is None) == (text is None):
            return _error(400, "invalid_body", None, "supply exactly one of image_b64 or description")
        image = None
        if image_b64 is not None:
            if not isinstance(image_b64, str) or not image_b64:
                return _error(400, "invalid_image", "describe", "image_b64 must be a non-empty string")
            try:
                image = base64.b64decode(image_b64, validate=True)
            except (binascii.Error, ValueError):
                return _error(400, "invalid_image", "describe", "image_b64 is not valid base64")
        elif not isinstance(text, str) or not text.strip():
            return _error(400, "invalid_description", "embed", "description must be a non-empty string")

        async with gate:
            try:
                result = await run_in_threadpool(screener.screen, image, text)
            except StageError as exc:
                cause = exc.cause
                if isinstance(cause, ValidationError):
                    return _error(400, "invalid_input", exc.stage, str(cause))
                if isinstance(cause, (TransportError, ProviderHTTPError, ProtocolError)) \
                        and not isinstance(cause, AuthenticationError):
                    return _error(502, "upstream_error", exc.stage, str(cause))
                logger.exception("stage %s failed", exc.stage)
                return _error(500, "internal_error", exc.stage, str(cause))
            except ValidationError as exc:
                return _error(400, "invalid_input", None, str(exc))
            except Exception as exc:  # a bad request must never take the service down
                logger.exception("unexpected failure")
                return _error(500, "internal_error", None, str(exc))
        return result.to_dict()

    return app
