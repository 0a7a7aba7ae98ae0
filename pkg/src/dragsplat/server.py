"""HTTP + WebSocket service exposing the editing pipeline, versioned under /v1.

Long jobs (lora/drag/refit) run on session threads; progress and telemetry
stream over a per-session WebSocket. Errors: 404 unknown session, 409
ordering violations (reason string in the body), 422 invalid payloads.
"""

from __future__ import annotations

import asyncio
import json

import numpy as np
from fastapi import FastAPI, Query, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse, Response

from .cameras import CameraPose, ProjectionError
from .config import AppConfig
from .gaussians import PlyError, save_ply
from .render import render
from .session import SessionError, SessionStore


def create_app(store: SessionStore) -> FastAPI:
    app = FastAPI(title="dragsplat", version="1")

    @app.exception_handler(SessionError)
    async def _session_error(request: Request, exc: SessionError):
        return JSONResponse(status_code=exc.status, content={"error": exc.reason})

    @app.exception_handler(PlyError)
    async def _ply_error(request: Request, exc: PlyError):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.post("/v1/sessions")
    def create_session():
        s = store.create()
        return {"id": s.id}

    @app.get("/v1/sessions/{sid}/status")
    def get_status(sid: str):
        s = store.get(sid)
        doc = dict(s.state)
        doc["pick_projections"] = s.pick_projections() if (s.picks and s.cams) else []
        doc["telemetry_len"] = len(s.telemetry)
        return doc

    @app.post("/v1/sessions/{sid}/ply")
    async def upload_ply(sid: str, request: Request):
        s = store.get(sid)
        body = await request.body()
        count = s.set_cloud(body)
        return {"count": count}

    @app.post("/v1/sessions/{sid}/cameras")
    def set_cameras(sid: str, payload: dict):
        s = store.get(sid)
        if "auto" in payload:
            spec = payload["auto"] or {}
            cams = s.auto_cameras(
                width=int(spec.get("width", store.config.render.width)),
                height=int(spec.get("height", store.config.render.height)),
                n=int(spec.get("n", 4)),
                elevation=float(spec.get("elevation_deg", store.config.render.elevation_deg)),
                seed=spec.get("seed"),
            )
        elif "cameras" in payload:
            cams = [CameraPose.from_json(c) for c in payload["cameras"]]
            s.set_cameras(cams)
        else:
            raise SessionError(422, "need 'cameras' or 'auto'")
        return {"cameras": [c.to_json() for c in cams]}

    @app.get("/v1/sessions/{sid}/render")
    def render_view(
        sid: str,
        view: int = Query(0, ge=0),
        splat_size: float = Query(1.0),
        buffers: int = Query(0),
    ):
        s = store.get(sid)
        cams = s.require_cams()
        if view >= len(cams):
            raise SessionError(422, f"view {view} out of range ({len(cams)} cameras)")
        img = render(
            s.require_cloud(),
            cams[view],
            background=store.config.render.background,
            splat_scale=splat_size,
            want_buffers=bool(buffers),
        )
        if buffers:
            return {
                "width": cams[view].width,
                "height": cams[view].height,
                "ids": img.gaussian_ids.astype(int).tolist(),
                "depth": np.round(img.depth, 6).tolist(),
                "alpha": np.round(img.alpha, 6).tolist(),
            }
        return Response(content=img.to_png_bytes(), media_type="image/png")

    @app.post("/v1/sessions/{sid}/picks")
    def set_picks(sid: str, payload: dict):
        s = store.get(sid)
        if "starts" not in payload or "ends" not in payload:
            raise SessionError(422, "need 'starts' and 'ends'")
        try:
            proj = s.set_picks(payload["starts"], payload["ends"], snap_tol=float(payload.get("snap_tol", 1e-4)))
        except ProjectionError as exc:
            raise SessionError(422, str(exc))
        return {"picks": s.state["picks"], "projections": proj}

    @app.post("/v1/sessions/{sid}/mask")
    def set_mask(sid: str, payload: dict):
        s = store.get(sid)
        if "stroke" in payload:
            st = payload["stroke"]
            count = s.apply_stroke(
                view=int(st["view"]),
                u=float(st["u"]),
                v=float(st["v"]),
                radius=float(st["radius"]),
                mode=st.get("mode", "add"),
            )
        elif "indices" in payload:
            count = s.set_mask(payload["indices"])
        else:
            raise SessionError(422, "need 'indices' or 'stroke'")
        return {"count": count, "indices": [int(i) for i in s.require_cloud().mask]}

    @app.post("/v1/sessions/{sid}/jobs/{job}")
    def start_job(sid: str, job: str):
        s = store.get(sid)
        if job == "lora":
            store.run_lora(s)
        elif job == "drag":
            store.run_drag(s)
        elif job == "refit":
            store.run_refit(s)
        else:
            raise SessionError(422, f"unknown job {job!r}")
        return {"job": job, "state": "running"}

    @app.get("/v1/sessions/{sid}/artifacts/{name}")
    def get_artifact(sid: str, name: str):
        s = store.get(sid)
        return FileResponse(s.artifact_path(name))

    @app.get("/v1/sessions/{sid}/export")
    def export_ply(sid: str):
        s = store.get(sid)
        cloud = s.require_cloud()
        out = s.dir / "export.ply"
        save_ply(cloud, out)
        return FileResponse(out, media_type="application/octet-stream", filename=f"{sid}.ply")

    @app.get("/v1/sessions/{sid}/telemetry")
    def telemetry_rest(sid: str, since: int = Query(0, ge=0)):
        s = store.get(sid)
        return {"records": [{"seq": seq, **rec} for seq, rec in s.telemetry_since(since)]}

    @app.websocket("/v1/sessions/{sid}/telemetry")
    async def telemetry(ws: WebSocket, sid: str, since: int = 0):
        await ws.accept()
        try:
            s = store.get(sid)
        except SessionError:
            await ws.close(code=4404)
            return
        cursor = since
        try:
            while True:
                batch = s.telemetry_since(cursor)
                for seq, rec in batch:
                    await ws.send_text(json.dumps({"seq": seq, **rec}))
                    cursor = seq + 1
                await asyncio.sleep(0.05)
        except WebSocketDisconnect:
            return

    return app


def serve(config: AppConfig):
    import uvicorn

    store = SessionStore(config.server.data_dir, config)
    app = create_app(store)
    uvicorn.run(app, host="127.0.0.1", port=config.server.port, log_level="warning")
