"""Multi-view drag editing on inverted diffusion latents.

One edit = DDIM-invert the four views to the editing step, then iterate
{motion supervision, latent update, point tracking} on the shared latent,
then denoise the edited latent with key/value replacement from a lockstep
reconstruction path so identity and texture survive.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .denoiser import MultiViewDenoiser
from .schedule import NoiseSchedule, ddim_sample_step, ddim_timesteps, invert_loop
from .tensor import Adam, Tensor, no_grad


@dataclass
class DragConfig:
    t_edit_fraction: float = 0.7
    ddim_steps: int = 50
    max_iters: int = 80
    latent_lr: float = 0.01  # eta of the latent update
    lam: float = 0.1  # off-mask drift penalty weight
    r1: int = 1
    r2: int = 3
    stop_radius: float = 1.0
    guidance_scale: float = 1.0  # unguided at 1.0; no CFG anywhere
    kv_share_layer_fraction: float = 0.8
    kv_share_from_step: int = 0
    invert_refine_steps: int = 3  # fixed-point iterations per inversion stride

    def __post_init__(self):
        if self.r1 < 0 or self.r2 < self.r1:
            raise ValueError("need 0 <= r1 <= r2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def t_edit(self, schedule: NoiseSchedule) -> int:
        stride = schedule.steps // self.ddim_steps
        return stride * int(round(self.t_edit_fraction * self.ddim_steps))


@dataclass
class HandleState:
    """Per-view handle/target pixel coordinates at iteration k."""

    handles: list  # V arrays of (n, 2) float (u, v)
    targets: list  # V arrays of (n, 2)
    iteration: int = 0

    def __post_init__(self):
        for h, g in zip(self.handles, self.targets):
            if len(h) != len(g):
                raise ValueError("handle/target counts differ")

    def distances(self) -> np.ndarray:
        return np.concatenate(
            [np.linalg.norm(h - g, axis=1) for h, g in zip(self.handles, self.targets)]
        )


@dataclass
class DragResult:
    edited: np.ndarray  # (V, 3, H, W) in [0, 1]
    reconstruction: np.ndarray  # same, the unedited path
    telemetry: list
    handles: list
    converged: bool
    latent: np.ndarray = None


def kv_shared_layers(num_layers: int, fraction: float) -> set[int]:
    """1-based attention layer positions that take reference K/V."""
    if fraction <= 0.0:
        return set()
    first = math.ceil(fraction * num_layers)
    return set(range(first, num_layers + 1))


def invert(net: MultiViewDenoiser, views: np.ndarray, cams, schedule: NoiseSchedule, cfg: DragConfig):
    """Deterministic inversion of the 4 views, trajectory cached up to t_edit."""
    t_edit = cfg.t_edit(schedule)
    with no_grad():

        def eps_fn(x, t):
            return net(x, t, cams).data

        traj = invert_loop(
            eps_fn,
            np.asarray(views),
            schedule,
            cfg.ddim_steps,
            stop_t=t_edit,
            refine_steps=cfg.invert_refine_steps,
        )
    return traj, t_edit


def patch_grid(center: np.ndarray, radius: int, width: int, height: int) -> np.ndarray:
    """(2r+1)^2 integer positions around the rounded center, clamped to bounds."""
    cx, cy = int(round(center[0])), int(round(center[1]))
    xs = np.clip(np.arange(cx - radius, cx + radius + 1), 0, width - 1)
    ys = np.clip(np.arange(cy - radius, cy + radius + 1), 0, height - 1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def motion_supervision_loss(
    features: Tensor,
    z_hat: Tensor,
    eps: Tensor,
    state: HandleState,
    masks: np.ndarray,
    z_prev_ref: np.ndarray,
    schedule: NoiseSchedule,
    t: int,
    t_prev: int,
    cfg: DragConfig,
):
    """Spec'd drag loss: feature patches pulled one unit step toward the
    targets (reference side stop-gradiented), plus the off-mask latent
    drift penalty through one extra DDIM step.

    Returns (loss, active_pair_count); zero active pairs means CONVERGED.
    """
    v, _, h, w = features.shape
    active = 0
    loss = None
    for view in range(v):
        fmap = tt.tslice(features, (view,))
        for hi, gi in zip(state.handles[view], state.targets[view]):
            delta = gi - hi
            dist = float(np.linalg.norm(delta))
            if dist <= cfg.stop_radius:
                continue
            active += 1
            d = delta / dist
            grid = patch_grid(hi, cfg.r1, w, h)
            ref = tt.stop_gradient(tt.bilinear_sample(fmap, grid))
            moved = tt.bilinear_sample(fmap, grid + d[None, :])
            term = tt.l1(moved, ref)
            loss = term if loss is None else loss + term
    if active == 0:
        return None, 0
    if cfg.lam > 0.0:
        z_prev_k = ddim_sample_step(z_hat, t, t_prev, eps, schedule)
        off_mask = (1.0 - np.asarray(masks, dtype=z_hat.dtype))[:, None, :, :]
        drift = (z_prev_k - Tensor(np.asarray(z_prev_ref))) * Tensor(off_mask)
        loss = loss + cfg.lam * tt.l1(drift, Tensor(np.zeros((), dtype=z_hat.dtype)))
    return loss, active


def track_points(
    f_new: np.ndarray, ref_vecs: np.ndarray, handles: np.ndarray, r2: int
) -> np.ndarray:
    """Nearest-neighbour handle relocation on the integer grid.

    f_new: (C, H, W) current features; ref_vecs: (n, C) original handle
    features (fixed at h^0); ties break to the smallest row-major offset.
    """
    c, h, w = f_new.shape
    out = handles.copy().astype(np.float64)
    for i, (hx, hy) in enumerate(handles):
        cx, cy = int(round(hx)), int(round(hy))
        if cx + r2 < 0 or cx - r2 > w - 1 or cy + r2 < 0 or cy - r2 > h - 1:
            warnings.warn(f"tracking patch for handle {i} left the image; handle frozen")
            continue
        best = None
        best_pos = None
        for y in range(max(cy - r2, 0), min(cy + r2, h - 1) + 1):
            for x in range(max(cx - r2, 0), min(cx + r2, w - 1) + 1):
                dist = float(np.abs(f_new[:, y, x] - ref_vecs[i]).sum())
                if best is None or dist < best:
                    best = dist
                    best_pos = (x, y)
        out[i] = best_pos
    return out


def consistent_denoise(
    net: MultiViewDenoiser,
    z_edit: np.ndarray,
    traj: dict,
    cams,
    schedule: NoiseSchedule,
    cfg: DragConfig,
):
    """Sample the edited latent to images, replacing K/V in the shared
    attention layers with those of a lockstep reconstruction path seeded
    from the cached inversion latent.

    Returns (edited, reconstruction), both clamped to [0, 1].
    """
    t_edit = cfg.t_edit(schedule)
    taus = [t for t in ddim_timesteps(schedule, cfg.ddim_steps) if t <= t_edit]
    missing = [t for t in taus if t not in traj]
    if missing or t_edit not in traj:
        raise KeyError(f"inversion trajectory is missing steps {missing or [t_edit]}")
    shared = kv_shared_layers(net.num_attention_layers, cfg.kv_share_layer_fraction)
    x_ref = np.asarray(traj[t_edit])
    x_ed = np.asarray(z_edit)
    with no_grad():
        for step_idx, t in enumerate(taus):
            t_prev = taus[step_idx + 1] if step_idx + 1 < len(taus) else 0
            rec: list = []
            eps_ref = net(x_ref, t, cams, kv_record=rec).data
            inject = rec if (shared and step_idx >= cfg.kv_share_from_step) else None
            eps_ed = net(x_ed, t, cams, kv_inject=inject, kv_share=shared if inject else None).data
            x_ref = ddim_sample_step(x_ref, t, t_prev, eps_ref, schedule)
            x_ed = ddim_sample_step(x_ed, t, t_prev, eps_ed, schedule)
    return np.clip(x_ed, 0.0, 1.0), np.clip(x_ref, 0.0, 1.0)


def run_drag(
    net: MultiViewDenoiser,
    schedule: NoiseSchedule,
    views: np.ndarray,
    cams,
    handles0: list,
    targets: list,
    masks: np.ndarray,
    cfg: DragConfig,
    telemetry_cb=None,
) -> DragResult:
    """Full edit: invert, optimize the latent with tracking, denoise with KV
    replacement. Telemetry carries one record per optimization iteration."""
    net.set_trainable(False)
    views = np.asarray(views, dtype=np.float32)
    traj, t_edit = invert(net, views, cams, schedule, cfg)
    taus = [t for t in ddim_timesteps(schedule, cfg.ddim_steps) if t <= t_edit]
    t_prev = taus[1] if len(taus) > 1 else 0
    z_t = np.asarray(traj[t_edit])

    with no_grad():
        eps0, f0 = net(z_t, t_edit, cams, want_features=True)
        eps0, f0 = eps0.data, f0.data
        z_prev_ref = ddim_sample_step(z_t, t_edit, t_prev, eps0, schedule)
        ref_vecs = [
            np.stack([_sample_vec(f0[v], p) for p in handles0[v]]) if len(handles0[v]) else np.zeros((0, f0.shape[1]))
            for v in range(len(handles0))
        ]

    state = HandleState(
        handles=[np.asarray(h, dtype=np.float64).reshape(-1, 2).copy() for h in handles0],
        targets=[np.asarray(g, dtype=np.float64).reshape(-1, 2).copy() for g in targets],
    )
    z_hat = Tensor(z_t.copy(), requires_grad=True)
    opt = Adam([z_hat], lr=cfg.latent_lr)
    telemetry = []
    converged = False

    for k in range(cfg.max_iters):
        eps, feats = net(z_hat, t_edit, cams, want_features=True)
        if k > 0:
            for v in range(len(state.handles)):
                if len(state.handles[v]):
                    state.handles[v] = track_points(
                        feats.data[v], ref_vecs[v], state.handles[v], cfg.r2
                    )
        state.iteration = k
        loss, active = motion_supervision_loss(
            feats, z_hat, eps, state, masks, z_prev_ref, schedule, t_edit, t_prev, cfg
        )
        if active == 0:
            converged = True
            break
        opt.zero_grad()
        loss.backward()
        if z_hat.grad is None or not np.all(np.isfinite(z_hat.grad)):
            raise FloatingPointError(f"non-finite latent gradient at drag iteration {k}")
        opt.step()
        record = {
            "iter": k,
            "loss": float(loss.data),
            "handles": [[float(u), float(v_)] for u, v_ in state.handles[0]],
            "per_view": [
                {
                    "handles": [[float(u), float(v_)] for u, v_ in state.handles[vi]],
                    "dists": [float(d) for d in np.linalg.norm(state.handles[vi] - state.targets[vi], axis=1)],
                }
                for vi in range(len(state.handles))
            ],
        }
        telemetry.append(record)
        if telemetry_cb is not None:
            telemetry_cb(record)

    edited, recon = consistent_denoise(net, z_hat.data, traj, cams, schedule, cfg)
    return DragResult(
        edited=edited,
        reconstruction=recon,
        telemetry=telemetry,
        handles=state.handles,
        converged=converged,
        latent=z_hat.data,
    )


def _sample_vec(fmap: np.ndarray, point: np.ndarray) -> np.ndarray:
    from .tensor import bilinear_sample

    return bilinear_sample(Tensor(fmap), np.asarray(point, dtype=np.float64)[None, :]).data[0]
