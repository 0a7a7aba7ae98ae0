"""Multi-view denoiser pretraining on procedurally rendered scenes.

Desk-scale stand-in for a large multi-view corpus: every step draws one
4-view scene (optionally from a fixed pool), one timestep, independent
noise per view, and minimizes the eps-prediction error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .denoiser import ArchConfig, MultiViewDenoiser
from .scenes import scene_views
from .schedule import NoiseSchedule, add_noise, make_schedule
from .tensor import Adam, Tensor


@dataclass
class PretrainConfig:
    steps: int = 1500
    learning_rate: float = 2e-3
    image_size: int = 32
    pool_scenes: int = 24
    seed: int = 0
    log_every: int = 50
    mix_sizes: tuple = ()  # extra sizes interleaved to keep the net scale-agnostic
    # low-noise regime matters disproportionately for inversion round trips:
    # oversample small timesteps and train local constancy via input jitter
    low_t_fraction: float = 0.35
    low_t_max: int = 100
    jitter_prob: float = 0.5
    jitter_std: float = 0.03


def make_dataset(n_scenes: int, size: int, seed: int) -> list:
    """List of (views, cams) pairs rendered from random clouds."""
    return [scene_views(seed * 1000 + i, size=size) for i in range(n_scenes)]


def pretrain_mv(
    dataset: list,
    steps: int,
    schedule: NoiseSchedule,
    cfg: PretrainConfig = None,
    net: MultiViewDenoiser = None,
    step_hook=None,
):
    """Train eps-prediction over the dataset; returns (net, loss trace)."""
    if not dataset:
        raise ValueError("empty dataset")
    cfg = cfg or PretrainConfig()
    net = net or MultiViewDenoiser(ArchConfig(), seed=cfg.seed)
    net.set_trainable(True)
    params = net.named_parameters()
    opt = Adam([params[k] for k in sorted(params)], lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for step in range(steps):
        views, cams = dataset[int(rng.integers(0, len(dataset)))]
        if rng.random() < cfg.low_t_fraction:
            t = int(rng.integers(1, cfg.low_t_max + 1))
        else:
            t = int(rng.integers(1, schedule.steps + 1))
        eps = rng.standard_normal(views.shape).astype(np.float32)
        noisy = add_noise(Tensor(views), t, Tensor(eps), schedule)
        if cfg.jitter_prob > 0 and rng.random() < cfg.jitter_prob:
            jitter = rng.standard_normal(views.shape).astype(np.float32) * cfg.jitter_std
            noisy = noisy + Tensor(jitter)
        pred = net(noisy, t, cams)
        loss = tt.mse(pred, Tensor(eps))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step_hook is not None and (step % cfg.log_every == 0 or step == steps - 1):
            step_hook(step=step, loss=losses[-1])
    net.set_trainable(False)
    return net, losses


def pretrain_toy(cfg: PretrainConfig = None, schedule: NoiseSchedule = None, step_hook=None):
    """Convenience wrapper: build the scene pool and train the default net."""
    cfg = cfg or PretrainConfig()
    schedule = schedule or make_schedule(1000)
    data = make_dataset(cfg.pool_scenes, cfg.image_size, cfg.seed)
    for extra in cfg.mix_sizes:
        data.extend(make_dataset(max(cfg.pool_scenes // 4, 1), extra, cfg.seed + 7))
    net, losses = pretrain_mv(data, cfg.steps, schedule, cfg, step_hook=step_hook)
    return net, schedule, losses
