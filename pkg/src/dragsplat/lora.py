"""Low-rank adapters on the denoiser's attention projections, and the
multi-view identity-preserving fine-tune that runs before every edit.

Adapters add scale * (x @ down) @ up to a projection's output; up starts
at zero so a freshly attached net is bit-identical to the base. The base
parameters stay frozen throughout fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .denoiser import MultiViewDenoiser
from .schedule import NoiseSchedule, add_noise
from .tensor import Adam, Tensor


@dataclass
class FinetuneConfig:
    learning_rate: float = 0.0005
    steps: int = 300
    rank: int = 16
    views: int = 4
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.views != 4:
            raise ValueError(f"this pipeline fine-tunes exactly 4 views, got {self.views}")


class LoraAdapter:
    def __init__(self, d_in: int, d_out: int, rank: int, rng, scale: float = 1.0):
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} too large for a {d_out}x{d_in} projection")
        self.rank = rank
        self.scale = scale
        self.down = Tensor(
            rng.normal(0.0, 1.0 / rank, size=(d_in, rank)).astype(np.float32), requires_grad=True
        )
        self.up = Tensor(np.zeros((rank, d_out), dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ((x @ self.down) @ self.up) * self.scale

    def param_count(self) -> int:
        return self.down.size + self.up.size

    def params(self):
        return [self.down, self.up]


def attach(net: MultiViewDenoiser, rank: int, seed: int = 0, scale: float = 1.0) -> dict:
    """Attach zero-initialized adapters to every attention q/k/v/out projection."""
    rng = np.random.default_rng(seed)
    adapters = {}
    for i, layer in enumerate(net.attention_layers(), start=1):
        for pname, lin in layer.projections().items():
            d_in, d_out = lin.w.shape
            ad = LoraAdapter(d_in, d_out, rank, rng, scale)
            lin.adapter = ad
            adapters[f"attn{i}.{pname}"] = ad
    return adapters


def detach(net: MultiViewDenoiser) -> None:
    for layer in net.attention_layers():
        for lin in layer.projections().values():
            lin.adapter = None


def adapter_params(adapters: dict) -> list:
    out = []
    for name in sorted(adapters):
        out.extend(adapters[name].params())
    return out


def added_parameter_count(adapters: dict) -> int:
    return sum(a.param_count() for a in adapters.values())


def save_adapters(path, adapters: dict, cfg: FinetuneConfig):
    from .checkpoint import save_checkpoint

    params = {}
    for name, ad in adapters.items():
        params[f"{name}.down"] = ad.down
        params[f"{name}.up"] = ad.up
    save_checkpoint(
        path,
        kind="adapter",
        arch=None,
        schedule=None,
        params=params,
        extra={"rank": cfg.rank, "scale": cfg.scale},
    )


def load_adapters(path, net: MultiViewDenoiser) -> dict:
    from .checkpoint import load_checkpoint

    blob = load_checkpoint(path)
    if blob["kind"] != "adapter":
        raise ValueError(f"checkpoint kind {blob['kind']!r} is not adapter-only")
    rank = int(blob["extra"]["rank"])
    adapters = attach(net, rank, scale=float(blob["extra"].get("scale", 1.0)))
    for name, ad in adapters.items():
        ad.down.data = blob["params"][f"{name}.down"].astype(np.float32)
        ad.up.data = blob["params"][f"{name}.up"].astype(np.float32)
    return adapters


def finetune_identity(
    net: MultiViewDenoiser,
    views: np.ndarray,
    cams,
    cfg: FinetuneConfig,
    schedule: NoiseSchedule,
    step_hook=None,
):
    """Fit adapters to reconstruct the session's own four renders.

    Per step: one shared timestep drawn uniformly from [1, T], an
    independent noise map per view, gradient step on the adapters only.
    Returns (adapters, loss trace).
    """
    views = np.asarray(views, dtype=np.float32)
    if views.shape[0] != cfg.views:
        raise ValueError(f"expected {cfg.views} views, got {views.shape[0]}")
    net.set_trainable(False)
    adapters = attach(net, cfg.rank, seed=cfg.seed, scale=cfg.scale)
    opt = Adam(adapter_params(adapters), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    z = Tensor(views)
    for step in range(cfg.steps):
        t = int(rng.integers(1, schedule.steps + 1))  # one t shared by the batch
        eps = rng.standard_normal(views.shape).astype(np.float32)
        noisy = add_noise(z, t, Tensor(eps), schedule)
        pred = net(noisy, t, cams)
        loss = tt.mse(pred, Tensor(eps))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step_hook is not None:
            step_hook(step=step, t=t, loss=losses[-1])
    return adapters, losses
