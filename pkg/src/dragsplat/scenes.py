"""Procedural toy scenes: random Gaussian blob clouds plus ready-made drag
cases (a subject cluster with per-view handle/target projections and masks).

These drive denoiser pretraining, the seeded editing suites, and the demo
CLI, so everything stays reproducible from a single integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import CameraPose, default_rig, project, rasterize_mask
from .gaussians import GaussianCloud, make_cloud, normalize_quats
from .render import render_views

PALETTE = np.array(
    [
        [0.9, 0.25, 0.2],
        [0.2, 0.65, 0.9],
        [0.95, 0.8, 0.25],
        [0.35, 0.85, 0.35],
        [0.8, 0.4, 0.85],
        [0.95, 0.55, 0.2],
        [0.3, 0.9, 0.75],
    ]
)


def random_cloud(seed: int, n_blobs: tuple = (5, 9), per_blob: tuple = (1, 3)) -> GaussianCloud:
    """Cluster-of-blobs scene inside the unit ball."""
    rng = np.random.default_rng(seed)
    mus, scales, rots, colors, opac = [], [], [], [], []
    for b in range(rng.integers(*n_blobs)):
        center = rng.uniform(-0.45, 0.45, size=3)
        color = PALETTE[rng.integers(0, len(PALETTE))] * rng.uniform(0.75, 1.0)
        for _ in range(rng.integers(*per_blob)):
            mus.append(center + rng.normal(0, 0.03, size=3))
            scales.append(np.exp(rng.uniform(np.log(0.07), np.log(0.16), size=3)))
            rots.append(rng.normal(size=4))
            colors.append(np.clip(color + rng.normal(0, 0.03, size=3), 0.05, 0.98))
            opac.append(rng.uniform(0.75, 0.95))
    return make_cloud(
        np.array(mus), np.array(scales), normalize_quats(np.array(rots)), np.array(colors), np.array(opac)
    )


def novel_cloud(seed: int) -> GaussianCloud:
    """Scene outside the pretraining distribution: a tilted ring of strongly
    anisotropic splats in off-palette colors plus a central subject blob.
    Identity fine-tuning earns its keep on inputs like these."""
    rng = np.random.default_rng(seed ^ 0xBEEF)
    mus, scales, rots, colors, opac = [], [], [], [], []
    tilt = rng.uniform(0.2, 0.9)
    n_ring = int(rng.integers(7, 11))
    hue = rng.uniform(0, 1, size=3)
    for k in range(n_ring):
        a = 2 * np.pi * k / n_ring
        mus.append([0.38 * np.cos(a), 0.30 * tilt * np.sin(a), 0.38 * np.sin(a)])
        s = np.array([0.16, 0.045, 0.045]) * rng.uniform(0.8, 1.25)
        scales.append(s)
        rots.append([np.cos(a / 2), 0.0, np.sin(a / 2), 0.0])
        colors.append(np.clip(hue * 0.3 + rng.uniform(0, 0.7, size=3), 0.05, 0.98))
        opac.append(rng.uniform(0.8, 0.95))
    # central subject: a compact cluster to drag
    center = rng.uniform(-0.08, 0.08, size=3)
    subject_color = np.clip(1.0 - hue, 0.1, 0.95)
    for _ in range(3):
        mus.append(center + rng.normal(0, 0.02, size=3))
        scales.append(np.exp(rng.uniform(np.log(0.09), np.log(0.14), size=3)))
        rots.append(rng.normal(size=4))
        colors.append(np.clip(subject_color + rng.normal(0, 0.05, size=3), 0.05, 0.98))
        opac.append(rng.uniform(0.85, 0.95))
    return make_cloud(
        np.array(mus), np.array(scales), normalize_quats(np.array(rots)), np.array(colors), np.array(opac)
    )


def scene_views(seed: int, size: int = 32, n_views: int = 4):
    """(views (V,3,H,W) float32 in [0,1], cams) for one random scene."""
    cloud = random_cloud(seed)
    cams = default_rig([0.0, 0.0, 0.0], 0.8, width=size, height=size, n=n_views)
    views = render_views(cloud, cams).astype(np.float32)
    return views, cams


@dataclass
class DragCase:
    cloud: GaussianCloud
    cams: list
    views: np.ndarray  # (V, 3, H, W)
    handles0: list  # V x (n, 2) projected start points
    targets: list  # V x (n, 2) projected end points
    masks: np.ndarray  # (V, H, W) binary
    start3d: np.ndarray
    end3d: np.ndarray
    subject: np.ndarray  # masked Gaussian indices


def drag_case(
    seed: int,
    size: int = 32,
    pull: float = 0.22,
    novel: bool = False,
    background=(0.0, 0.0, 0.0),
) -> DragCase:
    """A scene with one distinct subject blob and a 3D drag of length ``pull``.

    The handle is the subject's center Gaussian; the target is the same
    point displaced within the viewing plane so every camera sees a
    noticeable 2D motion. ``novel=True`` swaps in an out-of-distribution
    scene; an off-black ``background`` is the sharpest domain gap for the
    identity fine-tune ablation (the pretraining corpus is black-backed).
    """
    rng = np.random.default_rng(seed ^ 0x5EED)
    cloud = novel_cloud(seed) if novel else random_cloud(seed)
    # subject: the blob whose members sit closest together near the center
    subject_center = cloud.mu[np.argmin(np.linalg.norm(cloud.mu, axis=1))]
    subject = np.nonzero(np.linalg.norm(cloud.mu - subject_center, axis=1) < 0.12)[0]
    cloud.set_mask(subject)
    cams = default_rig([0.0, 0.0, 0.0], 0.8, width=size, height=size, n=4)
    views = render_views(cloud, cams, background=background).astype(np.float32)

    start3d = subject_center.copy()
    direction = rng.normal(size=3)
    direction[1] *= 0.4  # keep the drag mostly lateral
    direction /= np.linalg.norm(direction)
    end3d = start3d + pull * direction

    handles0, targets = [], []
    for cam in cams:
        uv = project(np.stack([start3d, end3d]), cam)
        handles0.append(uv[0:1].copy())
        targets.append(uv[1:2].copy())
    masks = np.stack([rasterize_mask(cloud, cam) for cam in cams]).astype(np.float32)
    return DragCase(cloud, cams, views, handles0, targets, masks, start3d, end3d, subject)
