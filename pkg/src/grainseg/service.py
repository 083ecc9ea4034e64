"""HTTP session service for live interactive annotation.

Sessions are in-memory with TTL eviction. Each session is single-writer
(per-session lock); the model is frozen and shared read-only. Session
state is maintained so that the current mask always equals a fresh
click-by-click replay of the session's click list at its granularity:
appending a click chains one forward pass on the stored previous
prediction, while granularity changes and undo trigger a full replay
from an empty mask prompt.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from PIL import Image as PILImage

from .clicks import ClickSimConfig, encode_disk_map
from .core import BinaryMask, Click, ClickSet, Image, Polarity, ProbabilityMap
from .errors import GrainsegError
from .model import PromptBundle, Segmenter, binarize
from .rle import rle_encode

DEFAULT_TTL_SECONDS = 30 * 60


class ServiceError(GrainsegError):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


@dataclass
class SessionState:
    session_id: str
    image: Image
    clicks: ClickSet = field(default_factory=ClickSet)
    granularity: float = 1.0
    prev_mask: np.ndarray | None = None
    last_mask: BinaryMask | None = None
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "h": self.image.h,
            "w": self.image.w,
            "granularity": self.granularity,
            "clicks": [
                {"row": c.row, "col": c.col, "polarity": c.polarity.value} for c in self.clicks
            ],
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }


class SessionManager:
    def __init__(self, model: Segmenter, click_cfg: ClickSimConfig, threshold: float, ttl: float):
        self.model = model
        self.click_cfg = click_cfg
        self.threshold = threshold
        self.ttl = ttl
        self.sessions: dict[str, SessionState] = {}
        self.registry_lock = threading.Lock()

    def evict_expired(self) -> None:
        now = time.time()
        with self.registry_lock:
            expired = [sid for sid, s in self.sessions.items() if now - s.updated_at > self.ttl]
            for sid in expired:
                del self.sessions[sid]

    def create(self, image: Image) -> SessionState:
        session = SessionState(session_id=uuid.uuid4().hex, image=image)
        with self.registry_lock:
            self.sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> SessionState:
        self.evict_expired()
        with self.registry_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "session_not_found", f"no session {session_id}")
        return session

    def delete(self, session_id: str) -> None:
        self.get(session_id)
        with self.registry_lock:
            self.sessions.pop(session_id, None)

    def _forward(self, session: SessionState, clicks: ClickSet, prev: np.ndarray) -> np.ndarray:
        disk = encode_disk_map(clicks, session.image.h, session.image.w, self.click_cfg)
        bundle = PromptBundle(disk_map=disk, prev_mask=prev, granularity=session.granularity)
        return self.model.predict(session.image, bundle).pixels

    def replay(self, session: SessionState) -> None:
        """Recompute the session mask click-by-click from an empty prompt."""
        h, w = session.image.h, session.image.w
        prev = np.zeros((h, w), dtype=np.float64)
        if len(session.clicks) == 0:
            session.prev_mask = prev
            session.last_mask = BinaryMask(np.zeros((h, w), dtype=bool))
            return
        partial = ClickSet()
        for click in session.clicks:
            partial.append(click)
            prev = self._forward(session, partial, prev)
        session.prev_mask = prev
        session.last_mask = binarize(ProbabilityMap(np.clip(prev, 0, 1)), self.threshold)

    def add_click(self, session: SessionState, click: Click) -> None:
        h, w = session.image.h, session.image.w
        if not (0 <= click.row < h and 0 <= click.col < w):
            raise ServiceError(400, "click_out_of_bounds", f"click outside {h}x{w} image")
        session.clicks.append(click)
        prev = session.prev_mask if session.prev_mask is not None else np.zeros((h, w))
        prob = self._forward(session, session.clicks, prev)
        session.prev_mask = prob
        session.last_mask = binarize(ProbabilityMap(np.clip(prob, 0, 1)), self.threshold)


def _mask_payload(mask: BinaryMask | None, h: int, w: int, fmt: str) -> dict:
    pixels = mask.pixels if mask is not None else np.zeros((h, w), dtype=bool)
    if fmt == "png":
        arr = np.where(pixels, 255, 0).astype(np.uint8)
        buf = io.BytesIO()
        PILImage.fromarray(arr, mode="L").save(buf, format="PNG")
        return {"format": "png", "h": h, "w": w, "data": base64.b64encode(buf.getvalue()).decode()}
    payload = rle_encode(pixels)
    payload["format"] = "rle"
    return payload


def _decode_image(data: str) -> Image:
    try:
        raw = base64.b64decode(data, validate=True)
        pil = PILImage.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise ServiceError(400, "invalid_payload", f"cannot decode image: {exc}") from exc
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    try:
        return Image(arr, id=uuid.uuid4().hex)
    except GrainsegError as exc:
        raise ServiceError(400, "invalid_payload", str(exc)) from exc


def create_app(
    model: Segmenter,
    click_cfg: ClickSimConfig | None = None,
    threshold: float = 0.5,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
) -> FastAPI:
    """Build the session API around a frozen segmenter."""
    model.eval()
    manager = SessionManager(model, click_cfg or ClickSimConfig(), threshold, ttl_seconds)
    app = FastAPI(title="grainseg annotation service")
    app.state.manager = manager

    @app.exception_handler(ServiceError)
    async def service_error_handler(_request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status, content={"error": {"code": exc.code, "message": str(exc)}}
        )

    def require_field(body: dict, name: str):
        if not isinstance(body, dict) or name not in body:
            raise ServiceError(400, "invalid_payload", f"missing field {name!r}")
        return body[name]

    async def read_json(request: Request) -> dict:
        try:
            return await request.json()
        except Exception as exc:
            raise ServiceError(400, "invalid_payload", "body is not valid JSON") from exc

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await read_json(request)
        image = _decode_image(str(require_field(body, "image")))
        session = manager.create(image)
        with session.lock:
            manager.replay(session)
        return {"session_id": session.session_id, "h": image.h, "w": image.w}

    @app.post("/sessions/{session_id}/clicks")
    async def add_click(session_id: str, request: Request, format: str = Query("rle")):
        body = await read_json(request)
        session = manager.get(session_id)
        try:
            polarity = Polarity(str(require_field(body, "polarity")))
            row = int(require_field(body, "row"))
            col = int(require_field(body, "col"))
        except (ValueError, TypeError) as exc:
            raise ServiceError(400, "invalid_payload", f"bad click body: {exc}") from exc
        with session.lock:
            manager.add_click(session, Click(row, col, polarity))
            session.updated_at = time.time()
            return {"mask": _mask_payload(session.last_mask, session.image.h, session.image.w, format)}

    @app.put("/sessions/{session_id}/granularity")
    async def set_granularity(session_id: str, request: Request, format: str = Query("rle")):
        body = await read_json(request)
        value = require_field(body, "value")
        if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
            raise ServiceError(400, "invalid_payload", "granularity must lie in [0,1]")
        session = manager.get(session_id)
        with session.lock:
            session.granularity = float(value)
            manager.replay(session)
            session.updated_at = time.time()
            return {"mask": _mask_payload(session.last_mask, session.image.h, session.image.w, format)}

    @app.post("/sessions/{session_id}/undo")
    async def undo(session_id: str, format: str = Query("rle")):
        session = manager.get(session_id)
        with session.lock:
            if len(session.clicks) == 0:
                raise ServiceError(400, "nothing_to_undo", "session has no clicks")
            session.clicks.clicks.pop()
            manager.replay(session)
            session.updated_at = time.time()
            return {"mask": _mask_payload(session.last_mask, session.image.h, session.image.w, format)}

    @app.post("/sessions/{session_id}/reset")
    async def reset(session_id: str):
        session = manager.get(session_id)
        with session.lock:
            session.clicks = ClickSet()
            manager.replay(session)
            session.updated_at = time.time()
            return {}

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        session = manager.get(session_id)
        return session.summary()

    @app.delete("/sessions/{session_id}")
    async def delete_session(session_id: str):
        manager.delete(session_id)
        return {}

    return app
