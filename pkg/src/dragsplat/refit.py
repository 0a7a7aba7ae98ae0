"""Refit masked Gaussians to the edited views, plus the image metrics used
to judge it. Only mask members move: gradients outside the mask are zeroed
before every update, so unmasked Gaussians stay byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .cameras import CameraPose
from .gaussians import GaussianCloud
from .render import splat
from .tensor import Adam, Tensor


class EmptyMaskError(ValueError):
    def __init__(self):
        super().__init__("EMPTY_MASK: refit needs a non-empty editable set")


@dataclass
class RefitConfig:
    iterations: int = 5000
    lr_position: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    ssim_weight: float = 0.2
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_position", "lr_color", "lr_opacity", "lr_scale", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must lie in [0, 1]")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; +inf for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return (w / w.sum()).astype(np.float64)


_SSIM_W = _gaussian_window()


def ssim(a, b, c1: float = 0.01**2, c2: float = 0.03**2):
    """Mean SSIM between (H, W, 3) images in [0, 1]; differentiable via the tape."""
    ta = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    tb = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    h, w, c = ta.shape
    x = tt.reshape(tt.transpose(ta, (2, 0, 1)), (c, 1, h, w))
    y = tt.reshape(tt.transpose(tb, (2, 0, 1)), (c, 1, h, w))
    win = Tensor(_SSIM_W[None, None].astype(ta.dtype))

    def blur(img):
        return tt.conv2d(img, win, stride=1, pad=5)

    mu_x, mu_y = blur(x), blur(y)
    sig_x = blur(x * x) - mu_x * mu_x
    sig_y = blur(y * y) - mu_y * mu_y
    sig_xy = blur(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sig_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
    return tt.tmean(num / den)


def refit(
    cloud: GaussianCloud,
    images: np.ndarray,
    cams,
    cfg: RefitConfig = None,
    progress_cb=None,
):
    """Fine-tune mask members so renders match the edited images.

    images: (V, 3, H, W) targets in [0, 1], one per camera. Returns
    (new cloud, loss trace); every non-masked Gaussian keeps its exact
    stored bytes.
    """
    cfg = cfg or RefitConfig()
    if cloud.mask is None or len(cloud.mask) == 0:
        raise EmptyMaskError()
    images = np.asarray(images)
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} images vs {len(cams)} cameras")
    mask_idx = np.asarray(cloud.mask, dtype=np.int64)
    keep = np.zeros(cloud.count, dtype=bool)
    keep[mask_idx] = True

    eps = 1e-6
    p_mu = Tensor(cloud.mu.astype(np.float64), requires_grad=True)
    p_logscale = Tensor(np.log(cloud.scale).astype(np.float64), requires_grad=True)
    p_rot = Tensor(cloud.rot.astype(np.float64), requires_grad=True)
    p_color = Tensor(cloud.color.astype(np.float64), requires_grad=True)
    p_logit = Tensor(
        np.log(np.clip(cloud.opacity, eps, 1 - eps) / (1 - np.clip(cloud.opacity, eps, 1 - eps))),
        requires_grad=True,
    )
    groups = [
        (p_mu, cfg.lr_position),
        (p_color, cfg.lr_color),
        (p_logit, cfg.lr_opacity),
        (p_logscale, cfg.lr_scale),
        (p_rot, cfg.lr_rotation),
    ]
    opts = [Adam([p], lr=lr) for p, lr in groups]
    targets = [Tensor(images[v].transpose(1, 2, 0).astype(np.float64)) for v in range(len(cams))]

    losses = []
    for it in range(cfg.iterations):
        loss = None
        for v, cam in enumerate(cams):
            out = splat(
                p_mu,
                tt.texp(p_logscale),
                p_rot,
                p_color,
                tt.sigmoid(p_logit),
                cam,
                background=cfg.background,
                grad_mask=mask_idx,
            )
            rgb = tt.tslice(out, (slice(None), slice(None), slice(0, 3)))
            l1_term = tt.l1(rgb, targets[v]) * (1.0 / rgb.size)
            term = (1.0 - cfg.ssim_weight) * l1_term + cfg.ssim_weight * (
                1.0 - ssim(rgb, targets[v])
            )
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(cams))
        for opt in opts:
            opt.zero_grad()
        loss.backward()
        for p, _ in groups:
            if p.grad is not None:
                p.grad[~keep] = 0.0
        for opt in opts:
            opt.step()
        losses.append(loss.item())
        if progress_cb is not None:
            progress_cb(it, losses[-1])

    new_cloud = GaussianCloud(
        cloud.mu.copy(),
        cloud.scale.copy(),
        cloud.rot.copy(),
        cloud.color.copy(),
        cloud.opacity.copy(),
        mask=mask_idx.copy(),
        stored={k: v.copy() for k, v in cloud.stored.items()},
        property_order=list(cloud.property_order),
    )
    new_cloud.update_rows(
        mask_idx,
        mu=p_mu.data[mask_idx],
        scale=np.exp(p_logscale.data[mask_idx]),
        rot=p_rot.data[mask_idx],
        color=np.clip(p_color.data[mask_idx], 0.0, 1.0),
        opacity=1.0 / (1.0 + np.exp(-p_logit.data[mask_idx])),
    )
    return new_cloud, losses
