"""Sessions: on-disk state, job lifecycle, and telemetry fan-out.

A session owns one cloud, four cameras, picks, a mask, and three job
slots (lora -> drag -> refit, in that order). At most one job runs per
session; state transitions are pending -> running -> done|failed. All
artifacts are content-addressed inside the session directory, so a
restarted server recovers every finished session from disk.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np

from . import lora as lora_mod
from .cameras import CameraPose, PointPick, default_rig, project, rasterize_mask
from .config import AppConfig
from .denoiser import MultiViewDenoiser
from .drag import run_drag
from .gaussians import GaussianCloud, load_ply, save_mask, save_ply
from .refit import EmptyMaskError, RefitConfig, refit
from .render import render, render_views
from .schedule import NoiseSchedule, make_schedule

JOBS = ("lora", "drag", "refit")


class SessionError(Exception):
    def __init__(self, status: int, reason: str):
        self.status = status
        self.reason = reason
        super().__init__(reason)


class Session:
    def __init__(self, store: "SessionStore", sid: str):
        self.store = store
        self.id = sid
        self.dir = store.root / sid
        self.lock = threading.RLock()
        self.telemetry: list = []  # (seq, record) pairs, monotonically growing
        self.telemetry_cv = threading.Condition()
        self.cloud: GaussianCloud | None = None
        self.cams: list[CameraPose] = []
        self.picks: PointPick | None = None
        self.state = {
            "id": sid,
            "created": time.time(),
            "cloud_count": None,
            "cameras": [],
            "picks": None,
            "mask": [],
            "jobs": {j: {"state": "pending", "progress": 0.0, "error": None} for j in JOBS},
            "artifacts": {},
        }

    # -- persistence ---------------------------------------------------------

    def save_state(self):
        tmp = self.dir / "state.json.tmp"
        tmp.write_text(json.dumps(self.state, indent=1))
        tmp.replace(self.dir / "state.json")

    @classmethod
    def load(cls, store: "SessionStore", sid: str) -> "Session":
        s = cls(store, sid)
        doc = json.loads((s.dir / "state.json").read_text())
        s.state = doc
        for j in JOBS:  # anything mid-flight when the server died is failed
            if doc["jobs"][j]["state"] == "running":
                doc["jobs"][j] = {"state": "failed", "progress": 0.0, "error": "interrupted"}
        ply = s.dir / "cloud.ply"
        if ply.exists():
            s.cloud = load_ply(ply)
            if doc["mask"]:
                s.cloud.set_mask(doc["mask"])
        s.cams = [CameraPose.from_json(c) for c in doc["cameras"]]
        if doc["picks"]:
            s.picks = PointPick(doc["picks"]["starts"], doc["picks"]["ends"])
        tele = s.dir / "telemetry.jsonl"
        if tele.exists():
            for i, line in enumerate(tele.read_text().splitlines()):
                if line.strip():
                    s.telemetry.append((i, json.loads(line)))
        return s

    # -- telemetry -------------------------------------------------------------

    def emit(self, record: dict):
        with self.telemetry_cv:
            seq = len(self.telemetry)
            self.telemetry.append((seq, record))
            with open(self.dir / "telemetry.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
            self.telemetry_cv.notify_all()

    def telemetry_since(self, since: int) -> list:
        return [(seq, rec) for seq, rec in self.telemetry if seq >= since]

    # -- artifacts ---------------------------------------------------------------

    def put_artifact(self, kind: str, ext: str, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()[:12]
        name = f"{kind}-{digest}{ext}"
        adir = self.dir / "artifacts"
        adir.mkdir(exist_ok=True)
        (adir / name).write_bytes(data)
        self.state["artifacts"][kind] = name
        self.save_state()
        return name

    def artifact_path(self, name: str) -> Path:
        p = (self.dir / "artifacts" / name).resolve()
        if not str(p).startswith(str((self.dir / "artifacts").resolve())) or not p.exists():
            raise SessionError(404, "artifact_not_found")
        return p

    # -- setters ------------------------------------------------------------------

    def set_cloud(self, ply_bytes: bytes):
        with self.lock:
            (self.dir / "cloud.ply").write_bytes(ply_bytes)
            self.cloud = load_ply(self.dir / "cloud.ply")
            self.state["cloud_count"] = self.cloud.count
            self.state["mask"] = []
            self.save_state()
            return self.cloud.count

    def require_cloud(self) -> GaussianCloud:
        if self.cloud is None:
            raise SessionError(409, "cloud_required")
        return self.cloud

    def set_cameras(self, cams: list[CameraPose]):
        with self.lock:
            self.cams = cams
            self.state["cameras"] = [c.to_json() for c in cams]
            self.save_state()

    def auto_cameras(self, width: int, height: int, n: int = 4, elevation: float = 15.0, seed=None):
        from .cameras import cloud_extent

        cloud = self.require_cloud()
        center, extent = cloud_extent(cloud)
        self.set_cameras(
            default_rig(center, extent, width=width, height=height, n=n, elevation_deg=elevation, seed=seed)
        )
        return self.cams

    def require_cams(self) -> list[CameraPose]:
        if not self.cams:
            raise SessionError(409, "cameras_required")
        return self.cams

    def set_picks(self, starts, ends, snap_tol: float = 1e-4):
        with self.lock:
            pick = PointPick(starts, ends).snapped_to(self.require_cloud(), tol=snap_tol)
            self.picks = pick
            self.state["picks"] = {
                "starts": pick.starts.tolist(),
                "ends": pick.ends.tolist(),
            }
            self.save_state()
            return self.pick_projections()

    def pick_projections(self) -> list:
        if self.picks is None:
            return []
        out = []
        for cam in self.require_cams():
            out.append(
                {
                    "handles": project(self.picks.starts, cam).tolist(),
                    "targets": project(self.picks.ends, cam).tolist(),
                }
            )
        return out

    def set_mask(self, indices):
        with self.lock:
            cloud = self.require_cloud()
            cloud.set_mask(indices)
            self.state["mask"] = [int(i) for i in cloud.mask]
            save_mask(cloud.mask, self.dir / "mask.txt")
            self.save_state()
            return len(cloud.mask)

    def apply_stroke(self, view: int, u: float, v: float, radius: float, mode: str = "add"):
        """Screen-space brush: select Gaussians whose projected center falls
        inside the stroke circle on the given view."""
        cloud = self.require_cloud()
        cam = self.require_cams()[view]
        current = set(int(i) for i in (cloud.mask if cloud.mask is not None else []))
        uv = _project_all(cloud, cam)
        hit = {
            int(i)
            for i in range(cloud.count)
            if uv[i] is not None and (uv[i][0] - u) ** 2 + (uv[i][1] - v) ** 2 <= radius**2
        }
        if mode == "add":
            current |= hit
        elif mode == "erase":
            current -= hit
        else:
            raise SessionError(422, f"unknown stroke mode {mode!r}")
        return self.set_mask(sorted(current))

    # -- jobs --------------------------------------------------------------------

    def job(self, name: str) -> dict:
        return self.state["jobs"][name]

    def check_startable(self, name: str):
        """Ordering and exclusivity rules; raises 409 without transitioning."""
        if any(j["state"] == "running" for j in self.state["jobs"].values()):
            raise SessionError(409, "busy")
        if name == "drag":
            if self.picks is None:
                raise SessionError(409, "picks_required")
            if self.job("lora")["state"] != "done":
                raise SessionError(409, "lora_required")
        if name == "refit" and self.job("drag")["state"] != "done":
            raise SessionError(409, "drag_required")
        self.require_cloud()
        self.require_cams()

    def start_job(self, name: str, runner) -> None:
        """Transition to running under the session lock; 409 when the order
        or the one-job-at-a-time rule is violated."""
        with self.lock:
            self.check_startable(name)
            self.state["jobs"][name] = {"state": "running", "progress": 0.0, "error": None}
            self.save_state()

        def wrapped():
            try:
                runner()
                with self.lock:
                    self.state["jobs"][name]["state"] = "done"
                    self.state["jobs"][name]["progress"] = 1.0
                    self.save_state()
                self.emit({"type": "job", "job": name, "state": "done"})
            except Exception as exc:  # surfaced through status + telemetry
                with self.lock:
                    self.state["jobs"][name] = {
                        "state": "failed",
                        "progress": 0.0,
                        "error": f"{type(exc).__name__}: {exc}",
                    }
                    self.save_state()
                self.emit({"type": "job", "job": name, "state": "failed", "error": str(exc)})

        thread = threading.Thread(target=wrapped, name=f"{self.id}-{name}", daemon=True)
        thread.start()

    def set_progress(self, name: str, value: float):
        with self.lock:
            self.state["jobs"][name]["progress"] = float(value)


def _project_all(cloud: GaussianCloud, cam: CameraPose):
    from .cameras import NEAR_PLANE, camera_space

    t = camera_space(cloud.mu, cam)
    out = []
    for i in range(cloud.count):
        if t[i, 2] <= NEAR_PLANE:
            out.append(None)
        else:
            out.append(
                (
                    cam.fx * t[i, 0] / t[i, 2] + cam.cx,
                    cam.fy * t[i, 1] / t[i, 2] + cam.cy,
                )
            )
    return out


class SessionStore:
    """All sessions under one data directory; thread-safe creation/lookup."""

    def __init__(self, root, config: AppConfig = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config or AppConfig()
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self._net = None
        self._schedule = None
        for sdir in sorted(self.root.iterdir()) if self.root.exists() else []:
            if (sdir / "state.json").exists():
                try:
                    self.sessions[sdir.name] = Session.load(self, sdir.name)
                except Exception:
                    continue

    def create(self) -> Session:
        with self._lock:
            sid = uuid.uuid4().hex[:12]
            s = Session(self, sid)
            s.dir.mkdir(parents=True)
            s.save_state()
            self.sessions[sid] = s
            return s

    def get(self, sid: str) -> Session:
        s = self.sessions.get(sid)
        if s is None:
            raise SessionError(404, "unknown_session")
        return s

    # -- heavy lifting shared by jobs -----------------------------------------

    def backbone(self):
        """A fresh denoiser instance per job: sessions run concurrently and
        LoRA attach/detach mutates the net, so instances are never shared."""
        path = self.config.server.checkpoint
        if not path or not Path(path).exists():
            raise SessionError(409, "checkpoint_missing")
        net, sched, _ = MultiViewDenoiser.load(path)
        schedule = sched or make_schedule(
            self.config.schedule.steps,
            self.config.schedule.beta_start,
            self.config.schedule.beta_end,
        )
        return net, schedule

    def run_lora(self, s: Session):
        with s.lock:
            s.check_startable("lora")
        net, schedule = self.backbone()
        cloud, cams = s.require_cloud(), s.require_cams()
        views = render_views(cloud, cams, background=self.config.render.background)
        cfg = self.config.lora

        def job():
            def hook(step, t, loss):
                s.set_progress("lora", (step + 1) / max(cfg.steps, 1))
                if step % 25 == 0 or step == cfg.steps - 1:
                    s.emit({"type": "lora", "step": step, "loss": loss})

            adapters, losses = lora_mod.finetune_identity(net, views, cams, cfg, schedule, step_hook=hook)
            lora_mod.save_adapters(s.dir / "adapters.ckpt", adapters, cfg)
            lora_mod.detach(net)

        s.start_job("lora", job)

    def run_drag(self, s: Session):
        with s.lock:
            s.check_startable("drag")
        net, schedule = self.backbone()
        cloud, cams = s.require_cloud(), s.require_cams()
        views = render_views(cloud, cams, background=self.config.render.background)
        proj = s.pick_projections()
        handles0 = [np.asarray(p["handles"]) for p in proj]
        targets = [np.asarray(p["targets"]) for p in proj]
        masks = np.stack([rasterize_mask(cloud, cam) for cam in cams]).astype(np.float32)
        cfg = self.config.drag

        def job():
            adapters = None
            if (s.dir / "adapters.ckpt").exists():
                adapters = lora_mod.load_adapters(s.dir / "adapters.ckpt", net)
            try:
                def cb(rec):
                    s.set_progress("drag", (rec["iter"] + 1) / cfg.max_iters)
                    s.emit({"type": "drag", **rec})

                result = run_drag(net, schedule, views, cams, handles0, targets, masks, cfg, telemetry_cb=cb)
            finally:
                if adapters is not None:
                    lora_mod.detach(net)
            np.save(s.dir / "edited_views.npy", result.edited)
            from .render import RenderedImage

            for v in range(len(cams)):
                img = RenderedImage(
                    rgb=result.edited[v].transpose(1, 2, 0), alpha=np.ones(result.edited[v].shape[1:])
                )
                s.put_artifact(f"edited_view{v}", ".png", img.to_png_bytes())
            s.emit({"type": "drag_summary", "iterations": len(result.telemetry), "converged": result.converged})

        s.start_job("drag", job)

    def run_refit(self, s: Session):
        with s.lock:
            s.check_startable("refit")
        cloud, cams = s.require_cloud(), s.require_cams()
        edited = np.load(s.dir / "edited_views.npy")
        cfg = self.config.refit

        def job():
            def cb(it, loss):
                s.set_progress("refit", (it + 1) / cfg.iterations)
                if it % 100 == 0 or it == cfg.iterations - 1:
                    s.emit({"type": "refit", "iter": it, "loss": loss})

            try:
                new_cloud, losses = refit(cloud, edited, cams, cfg, progress_cb=cb)
            except EmptyMaskError:
                raise SessionError(409, "EMPTY_MASK")
            save_ply(new_cloud, s.dir / "refit.ply")
            s.put_artifact("refit_ply", ".ply", (s.dir / "refit.ply").read_bytes())
            s.cloud = new_cloud

        s.start_job("refit", job)
