"""Noise schedule and deterministic DDIM stepping.

The schedule stores the cumulative signal fractions alpha_bar_0..alpha_bar_T
(alpha_bar_0 = 1, the clean image). Step functions take an eps prediction as
an argument, work on plain arrays or tape Tensors alike, and are exact
algebraic inverses of each other for a shared eps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np


@dataclass
class NoiseSchedule:
    steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)  # length steps+1, alpha_bar[0] == 1

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar_t)."""
        return float(np.sqrt(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t)."""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def to_json(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["steps"]), float(d["beta_start"]), float(d["beta_end"]))


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule; alpha_bar_t = prod_{s<=t}(1 - beta_s), strictly decreasing."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if beta_start > 0.0 and not np.all(np.diff(alpha_bar) < 0):
        raise ValueError("alpha_bar failed to decrease strictly")
    if alpha_bar[-1] <= 0.0:
        raise ValueError("alpha_bar_T must stay positive")
    return NoiseSchedule(steps, beta_start, beta_end, betas, alpha_bar)


def ddim_timesteps(schedule: NoiseSchedule, num_steps: int) -> list[int]:
    """Descending stride schedule T, T-d, ..., d (paired with 0 at the end)."""
    if num_steps < 1 or num_steps > schedule.steps:
        raise ValueError(f"num_steps must be in [1, {schedule.steps}], got {num_steps}")
    stride = schedule.steps // num_steps
    return [stride * i for i in range(num_steps, 0, -1)]


def add_noise(x0, t: int, eps, schedule: NoiseSchedule):
    """Variance-preserving forward: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    return schedule.signal(t) * x0 + schedule.noise(t) * eps


def ddim_sample_step(x_t, t: int, t_prev: int, eps, schedule: NoiseSchedule, sigma: float = 0.0, noise=None):
    """One deterministic (sigma=0) DDIM step from t down to t_prev.

    x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps + sigma * noise
    with x0_hat = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t).
    """
    if t < 1:
        raise ValueError(f"sample step needs t >= 1, got {t}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    var_prev = 1.0 - schedule.alpha_bar[t_prev]
    if sigma**2 > var_prev + 1e-12:
        raise ValueError(f"sigma^2 {sigma**2:.3g} exceeds 1 - alpha_bar_prev {var_prev:.3g}")
    s_t, n_t = schedule.signal(t), schedule.noise(t)
    s_p = schedule.signal(t_prev)
    dir_coef = math.sqrt(max(1.0 - schedule.alpha_bar[t_prev] - sigma**2, 0.0))
    x0_hat = (x_t - n_t * eps) * (1.0 / s_t)
    out = s_p * x0_hat + dir_coef * eps
    if sigma > 0.0:
        if noise is None:
            raise ValueError("sigma > 0 requires a noise draw")
        out = out + sigma * noise
    return out


def ddim_invert_step(x_prev, t: int, t_prev: int, eps, schedule: NoiseSchedule):
    """Algebraic inverse of ddim_sample_step for the same eps (sigma = 0)."""
    if t < 1:
        raise ValueError(f"invert step needs t >= 1, got {t}")
    s_t, n_t = schedule.signal(t), schedule.noise(t)
    s_p, n_p = schedule.signal(t_prev), schedule.noise(t_prev)
    return (s_t / s_p) * (x_prev - n_p * eps) + n_t * eps


def invert_loop(
    eps_fn,
    x0,
    schedule: NoiseSchedule,
    num_steps: int,
    stop_t: int | None = None,
    refine_steps: int = 3,
    refine_tol: float = 1e-4,
):
    """DDIM inversion from the clean image upward.

    Each stride starts from the standard approximation (eps at the source
    latent) and then runs up to refine_steps fixed-point iterations of the
    implicit equation, re-evaluating eps at the current target estimate.
    With refinement the inversion is the exact preimage of the sampling
    step, so invert-then-sample reconstructs to the fixed-point residual
    rather than to the net's local inconsistency. refine_steps=0 recovers
    the plain approximation. Returns {timestep: latent} containing 0 and
    every visited stride; stops at stop_t (inclusive) when given.
    """
    taus = list(reversed(ddim_timesteps(schedule, num_steps)))  # ascending
    traj = {0: x0}
    x = x0
    prev = 0
    for t in taus:
        eps = eps_fn(x, t)
        x_next = ddim_invert_step(x, t, prev, eps, schedule)
        for _ in range(refine_steps):
            eps = eps_fn(x_next, t)
            refined = ddim_invert_step(x, t, prev, eps, schedule)
            delta = np.abs(_raw(refined) - _raw(x_next)).max()
            x_next = refined
            if delta < refine_tol:
                break
        x = x_next
        _assert_finite(x, t)
        traj[t] = x
        prev = t
        if stop_t is not None and t >= stop_t:
            break
    return traj


def sample_loop(eps_fn, x_t, schedule: NoiseSchedule, num_steps: int, start_t: int | None = None):
    """DDIM sampling from start_t (default T) down to the clean image."""
    taus = ddim_timesteps(schedule, num_steps)  # descending
    if start_t is not None:
        taus = [t for t in taus if t <= start_t]
    x = x_t
    for i, t in enumerate(taus):
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        eps = eps_fn(x, t)
        x = ddim_sample_step(x, t, t_prev, eps, schedule)
        _assert_finite(x, t)
    return x


def _raw(x):
    # unwrap tape Tensors; plain ndarrays pass through (ndarray.data is a memoryview)
    return x if isinstance(x, np.ndarray) else getattr(x, "data", x)


def _assert_finite(x, t: int):
    if not np.all(np.isfinite(_raw(x))):
        raise FloatingPointError(f"latent became non-finite at step {t}")
