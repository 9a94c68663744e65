"""HTTP/WebSocket facade over the engine.

One server process hosts many sessions.  Each session owns one scene and
one exclusive writer: the training thread while the session is being
optimized, the edit queue afterwards.  A lock serializes every mutation;
renders and queries read an immutable snapshot that the writer republishes
at milestones (every tenth training step, and after every edit or undo),
so readers never block the writer and never observe a half-applied step.

All request and response bodies are JSON; images travel base64-encoded
inside them.  Scene exports use the binary scene-file container.

Error mapping: unknown session 404; malformed input 400; conflicts 409,
which covers edits carrying a stale revision, queries before the codec
exists, and edits while training still owns the scene.
"""
from __future__ import annotations

import base64
import dataclasses
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue

import numpy as np
from fastapi import (
    FastAPI,
    HTTPException,
    Request,
    Response,
    WebSocket,
    WebSocketDisconnect,
)
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .editing import AugmentSpec, EditOp, apply_edit, undo
from .errors import InvalidArgumentError, InvalidStateError
from .priors import mock_bundle
from .raster import RenderContext, rasterize
from .scene import Camera, GaussianScene
from .sceneio import image_to_png_bytes, read_png, to_bytes
from .semantics import gaussian_relevancy, query_bbox, query_text
from .trainer import TrainConfig, Trainer, optimize

MAX_RENDER_SIDE = 1024
SNAPSHOT_EVERY = 10

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_AUGMENT_FIELDS = {f.name for f in dataclasses.fields(AugmentSpec)}


def _parse_config(data: dict | None) -> TrainConfig:
    data = dict(data or {})
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
    aug = data.get("augment")
    if aug is not None:
        bad = set(aug) - _AUGMENT_FIELDS
        if bad:
            raise InvalidArgumentError(
                f"unknown augment fields: {sorted(bad)}")
        data["augment"] = AugmentSpec(**aug)
    return TrainConfig(**data)


@dataclass
class Session:
    """One image's scene, its writer lock, and its live status."""

    id: str
    priors: object
    camera: Camera
    cfg: TrainConfig
    lock: threading.Lock = field(default_factory=threading.Lock)
    state: str = "lifting"
    scene: GaussianScene | None = None
    codec: object | None = None
    snapshot: GaussianScene | None = None
    step: int = 0
    losses: dict = field(default_factory=dict)
    psnr: float | None = None
    error: str | None = None
    subscribers: list = field(default_factory=list)

    def status(self) -> dict:
        return {
            "state": self.state,
            "step": self.step,
            "steps": self.cfg.steps,
            "losses": self.losses,
            "psnr": self.psnr,
            "revision": None if self.scene is None else self.scene.revision,
            "gaussians": None if self.scene is None else self.scene.n,
            "error": self.error,
        }

    def publish(self, kind: str) -> None:
        """Republish the snapshot and push a frame; caller holds the lock."""
        self.snapshot = self.scene.copy()
        if not self.subscribers:
            return
        png = image_to_png_bytes(
            np.clip(rasterize(self.snapshot, self.camera).rgb, 0.0, 1.0))
        message = {
            "kind": kind,
            "step": self.step,
            "revision": self.scene.revision,
            "png": base64.b64encode(png).decode("ascii"),
        }
        for queue in list(self.subscribers):
            queue.put_nowait(message)


def _train_session(session: Session, image: np.ndarray) -> None:
    """Writer thread: lift, expand, fit the codec, then step the trainer."""
    try:
        setup_cfg = dataclasses.replace(session.cfg, steps=0)
        scene, codec, _ = optimize(image, session.camera, setup_cfg,
                                   session.priors)
        references = scene.aux["references"]
        interpolated = scene.aux["interpolated"]
        with session.lock:
            session.scene = scene
            session.codec = codec
            session.state = "training" if session.cfg.steps else "ready"
            session.publish("lifted")
        if session.cfg.steps:
            trainer = Trainer(scene, session.cfg, session.priors,
                              references, interpolated)
            for step in range(session.cfg.steps):
                with session.lock:
                    record = trainer.train_step(step)
                    session.step = step + 1
                    session.losses = record["losses"]
                    session.psnr = record["psnr"]
                    if (step + 1) % SNAPSHOT_EVERY == 0:
                        session.publish("train")
            with session.lock:
                session.state = "ready"
                session.publish("ready")
    except Exception as exc:  # surfaced via status, not a dead thread
        with session.lock:
            session.state = "failed"
            session.error = f"{type(exc).__name__}: {exc}"


def build_app(priors_factory=None) -> FastAPI:
    """Construct the service; priors_factory supplies one bundle per
    session (defaults to the deterministic mock bundle)."""
    if priors_factory is None:
        priors_factory = lambda: mock_bundle(embed_dim=32)  # noqa: E731

    app = FastAPI(title="splatedit")
    sessions: dict[str, Session] = {}
    app.state.sessions = sessions

    @app.exception_handler(InvalidArgumentError)
    async def _bad_request(request: Request, exc: InvalidArgumentError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(InvalidStateError)
    async def _conflict(request: Request, exc: InvalidStateError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    def require_session(session_id: str) -> Session:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown session {session_id}")
        return session

    def ready_scene(session: Session) -> GaussianScene:
        scene = session.snapshot
        if scene is None:
            raise InvalidStateError("scene is not lifted yet")
        return scene

    @app.post("/session")
    def create_session(body: dict):
        if "image_png" not in body or "camera" not in body:
            raise InvalidArgumentError("need image_png and camera")
        try:
            png = base64.b64decode(body["image_png"], validate=True)
            image = read_png(png)
        except InvalidArgumentError:
            raise
        except Exception as exc:
            raise InvalidArgumentError(f"bad image_png payload: {exc}")
        camera = Camera.from_json(body["camera"])
        if image.shape[:2] != (camera.height, camera.width):
            raise InvalidArgumentError(
                f"image {image.shape[:2]} does not match camera "
                f"({camera.height}, {camera.width})")
        if max(camera.width, camera.height) > MAX_RENDER_SIDE:
            raise InvalidArgumentError(
                f"image side exceeds the {MAX_RENDER_SIDE} cap")
        cfg = _parse_config(body.get("config"))
        session = Session(id=uuid.uuid4().hex[:12], priors=priors_factory(),
                          camera=camera, cfg=cfg)
        sessions[session.id] = session
        thread = threading.Thread(target=_train_session,
                                  args=(session, image), daemon=True)
        thread.start()
        return {"session_id": session.id}

    @app.get("/session/{session_id}/status")
    def session_status(session_id: str):
        return require_session(session_id).status()

    @app.post("/session/{session_id}/render")
    def render_view(session_id: str, body: dict):
        session = require_session(session_id)
        scene = ready_scene(session)
        camera = session.camera if body.get("camera") is None \
            else Camera.from_json(body["camera"])
        if max(camera.width, camera.height) > MAX_RENDER_SIDE:
            raise InvalidArgumentError(
                f"render side exceeds the {MAX_RENDER_SIDE} cap")
        out = rasterize(scene, camera)
        payload = {
            "revision": scene.revision,
            "render_png": base64.b64encode(image_to_png_bytes(
                np.clip(out.rgb, 0.0, 1.0))).decode("ascii"),
            "heatmap_png": None,
        }
        text = body.get("heatmap_text")
        if text:
            if session.codec is None:
                raise InvalidStateError("codec not ready")
            indices, scores = gaussian_relevancy(
                scene, session.priors.embedder, text)
            override = np.zeros((scene.n, 1))
            override[indices, 0] = scores
            ctx = RenderContext(scene, camera, feature_override=override)
            heat = ctx.forward().feature[:, :, 0]
            gray = np.clip(np.repeat(heat[:, :, None], 3, axis=2), 0.0, 1.0)
            payload["heatmap_png"] = base64.b64encode(
                image_to_png_bytes(gray)).decode("ascii")
        return payload

    @app.post("/session/{session_id}/query/text")
    def query_by_text(session_id: str, body: dict):
        session = require_session(session_id)
        scene = ready_scene(session)
        if session.codec is None:
            raise InvalidStateError("codec not ready")
        if "text" not in body:
            raise InvalidArgumentError("need text")
        tau = float(body.get("tau", 0.5))
        selection = query_text(scene, session.priors.embedder,
                               body["text"], tau=tau)
        indices, scores = gaussian_relevancy(scene, session.priors.embedder,
                                             body["text"])
        out = selection.to_json()
        out["active_indices"] = [int(i) for i in indices]
        out["scores"] = [float(s) for s in scores]
        return out

    @app.post("/session/{session_id}/query/bbox")
    def query_by_bbox(session_id: str, body: dict):
        session = require_session(session_id)
        scene = ready_scene(session)
        if session.codec is None:
            raise InvalidStateError("codec not ready")
        if "rect" not in body:
            raise InvalidArgumentError("need rect")
        camera = session.camera if body.get("camera") is None \
            else Camera.from_json(body["camera"])
        selection = query_bbox(scene, camera, body["rect"],
                               k=int(body.get("k", 3)),
                               rho=float(body.get("rho", 0.1)))
        return selection.to_json()

    @app.post("/session/{session_id}/edit")
    def edit_scene(session_id: str, body: dict):
        session = require_session(session_id)
        with session.lock:
            if session.state != "ready":
                raise InvalidStateError(
                    f"session is {session.state}; edits need a ready scene")
            op = EditOp.from_json(body)
            apply_edit(session.scene, op)
            session.publish("edit")
            return {"revision": session.scene.revision}

    @app.post("/session/{session_id}/undo")
    def undo_edit(session_id: str):
        session = require_session(session_id)
        with session.lock:
            if session.state != "ready":
                raise InvalidStateError(
                    f"session is {session.state}; undo needs a ready scene")
            undo(session.scene)
            session.publish("edit")
            return {"revision": session.scene.revision}

    @app.get("/session/{session_id}/export")
    def export_scene(session_id: str):
        session = require_session(session_id)
        with session.lock:
            scene = ready_scene(session)
            data = to_bytes(scene, session.codec, camera=session.camera,
                            seed=session.cfg.seed)
        return Response(content=data, media_type="application/octet-stream")

    @app.websocket("/session/{session_id}/stream")
    async def stream(websocket: WebSocket, session_id: str):
        session = sessions.get(session_id)
        if session is None:
            await websocket.close(code=4404)
            return
        await websocket.accept()
        queue: Queue = Queue()
        with session.lock:
            session.subscribers.append(queue)
            hello = {"kind": "hello", **session.status()}
        try:
            await websocket.send_json(hello)
            while True:
                try:
                    message = await run_in_threadpool(queue.get, True, 0.5)
                except Empty:
                    continue
                await websocket.send_json(message)
        except WebSocketDisconnect:
            pass
        finally:
            with session.lock:
                if queue in session.subscribers:
                    session.subscribers.remove(queue)

    # dev checkouts carry the browser editor at /ui; wheel installs do not
    frontend = Path(__file__).resolve().parents[2] / "frontend"
    if (frontend / "index.html").is_file():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=frontend, html=True),
                  name="ui")

    return app


def serve(host: str = "127.0.0.1", port: int = 8723,
          priors_factory=None) -> None:
    """Run the service under uvicorn; blocks until interrupted."""
    import uvicorn

    uvicorn.run(build_app(priors_factory), host=host, port=port,
                log_level="warning")
