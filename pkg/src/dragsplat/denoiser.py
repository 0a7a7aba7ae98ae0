"""Toy multi-view noise-prediction network.

Encoder-decoder over the four views jointly: convolutions act per view,
while each attention block flattens all views into one token sequence so
every view attends to every other (the cross-view coupling that makes the
edit consistent). Conditioning is a sinusoidal timestep embedding plus a
camera embedding (flattened world-to-camera through a 2-layer perceptron),
added per view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .cameras import CameraPose
from .tensor import Tensor


@dataclass
class ArchConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    emb_dim: int = 64
    groups: int = 8
    views: int = 4

    def to_json(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "emb_dim": self.emb_dim,
            "groups": self.groups,
            "views": self.views,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            widths=tuple(d["widths"]),
            emb_dim=int(d["emb_dim"]),
            groups=int(d["groups"]),
            views=int(d["views"]),
        )


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32)


def flatten_cams(cams) -> np.ndarray:
    rows = []
    for cam in cams:
        w2c = cam.world_to_camera if isinstance(cam, CameraPose) else np.asarray(cam)
        rows.append(np.asarray(w2c, dtype=np.float64).reshape(-1)[:16])
    return np.stack(rows).astype(np.float32)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng, scale: float | None = None, zero: bool = False):
        s = scale if scale is not None else 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, s, size=(d_in, d_out))
        self.w = Tensor(w.astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)
        self.adapter = None  # set by the lora module

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w + self.b
        if self.adapter is not None:
            out = out + self.adapter(x)
        return out

    def params(self, prefix: str):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv:
    def __init__(self, c_in: int, c_out: int, rng, k: int = 3, stride: int = 1, zero: bool = False):
        fan = c_in * k * k
        w = np.zeros((c_out, c_in, k, k)) if zero else rng.normal(0.0, math.sqrt(2.0 / fan), size=(c_out, c_in, k, k))
        self.w = Tensor(w.astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return tt.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self, prefix: str):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GroupNorm:
    def __init__(self, channels: int, groups: int):
        self.groups = math.gcd(groups, channels)
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        v, c, h, w = x.shape
        g = self.groups
        xg = tt.reshape(x, (v, g, (c // g) * h * w))
        mu = tt.tmean(xg, axis=2, keepdims=True)
        cent = xg - mu
        var = tt.tmean(cent * cent, axis=2, keepdims=True)
        xn = cent / tt.tsqrt(var + 1e-5)
        xn = tt.reshape(xn, (v, c, h, w))
        return xn * tt.reshape(self.gamma, (1, c, 1, 1)) + tt.reshape(self.beta, (1, c, 1, 1))

    def params(self, prefix: str):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class ResBlock:
    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int, rng):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv(c_in, c_out, rng)
        self.emb_proj = Linear(emb_dim, c_out, rng)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv(c_out, c_out, rng)
        self.skip = Conv(c_in, c_out, rng, k=1) if c_in != c_out else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(tt.silu(self.norm1(x)))
        v, c = h.shape[0], h.shape[1]
        h = h + tt.reshape(self.emb_proj(emb), (v, c, 1, 1))
        h = self.conv2(tt.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)

    def params(self, prefix: str):
        out = {}
        out.update(self.norm1.params(f"{prefix}.norm1"))
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.emb_proj.params(f"{prefix}.emb"))
        out.update(self.norm2.params(f"{prefix}.norm2"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        if self.skip is not None:
            out.update(self.skip.params(f"{prefix}.skip"))
        return out


class CrossViewAttention:
    """Single-head self-attention over the joint token set of all views."""

    def __init__(self, channels: int, groups: int, rng):
        self.norm = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng, zero=True)
        self.channels = channels
        self.last_attn_rowsum = None  # debug probe, set when capture is on

    def __call__(self, x: Tensor, kv_source=None, record=None, capture: bool = False) -> Tensor:
        v, c, h, w = x.shape
        n = self.norm(x)
        tokens = tt.reshape(tt.transpose(n, (0, 2, 3, 1)), (v * h * w, c))
        q = self.q(tokens)
        if kv_source is not None:
            k_in, v_in = Tensor(kv_source[0]), Tensor(kv_source[1])
        else:
            k_in, v_in = self.k(tokens), self.v(tokens)
        if record is not None:
            record.append((k_in.data.copy(), v_in.data.copy()))
        scores = (q @ tt.transpose(k_in, (1, 0))) * (1.0 / math.sqrt(c))
        attn = tt.softmax(scores, axis=-1)
        if capture:
            self.last_attn_rowsum = attn.data.sum(axis=-1)
        mixed = self.out(attn @ v_in)
        return x + tt.transpose(tt.reshape(mixed, (v, h, w, c)), (0, 3, 1, 2))

    def params(self, prefix: str):
        out = {}
        out.update(self.norm.params(f"{prefix}.norm"))
        for name in ("q", "k", "v", "out"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out

    def projections(self):
        return {"q": self.q, "k": self.k, "v": self.v, "out": self.out}


class MultiViewDenoiser:
    """eps-prediction net shared by pretraining, LoRA fine-tuning, and editing."""

    def __init__(self, cfg: ArchConfig = None, seed: int = 0):
        self.cfg = cfg or ArchConfig()
        rng = np.random.default_rng(seed)
        w0, w1, w2 = self.cfg.widths
        g = self.cfg.groups
        e = self.cfg.emb_dim
        self.time_mlp = [Linear(e, e, rng), Linear(e, e, rng)]
        self.cam_mlp = [Linear(16, e, rng), Linear(e, e, rng)]
        self.conv_in = Conv(self.cfg.in_channels, w0, rng)
        self.enc0 = ResBlock(w0, w0, e, g, rng)
        self.down0 = Conv(w0, w1, rng, stride=2)
        self.enc1 = ResBlock(w1, w1, e, g, rng)
        self.attn_enc1 = CrossViewAttention(w1, g, rng)
        self.down1 = Conv(w1, w2, rng, stride=2)
        self.mid1 = ResBlock(w2, w2, e, g, rng)
        self.attn_mid = CrossViewAttention(w2, g, rng)
        self.mid2 = ResBlock(w2, w2, e, g, rng)
        self.up1 = Conv(w2, w1, rng)
        self.dec1 = ResBlock(w1 * 2, w1, e, g, rng)
        self.attn_dec1 = CrossViewAttention(w1, g, rng)
        self.up0 = Conv(w1, w0, rng)
        self.dec0 = ResBlock(w0 * 2, w0, e, g, rng)
        self.norm_out = GroupNorm(w0, g)
        self.conv_out = Conv(w0, self.cfg.in_channels, rng, zero=True)

    # attention blocks in forward order; KV sharing counts 1-based from here
    def attention_layers(self):
        return [self.attn_enc1, self.attn_mid, self.attn_dec1]

    @property
    def num_attention_layers(self) -> int:
        return len(self.attention_layers())

    def _blocks(self):
        return {
            "time0": self.time_mlp[0],
            "time1": self.time_mlp[1],
            "cam0": self.cam_mlp[0],
            "cam1": self.cam_mlp[1],
            "conv_in": self.conv_in,
            "enc0": self.enc0,
            "down0": self.down0,
            "enc1": self.enc1,
            "attn_enc1": self.attn_enc1,
            "down1": self.down1,
            "mid1": self.mid1,
            "attn_mid": self.attn_mid,
            "mid2": self.mid2,
            "up1": self.up1,
            "dec1": self.dec1,
            "attn_dec1": self.attn_dec1,
            "up0": self.up0,
            "dec0": self.dec0,
            "norm_out": self.norm_out,
            "conv_out": self.conv_out,
        }

    def named_parameters(self) -> dict:
        out = {}
        for name, block in self._blocks().items():
            out.update(block.params(name))
        return out

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def embed(self, t: float, cams) -> Tensor:
        te = Tensor(timestep_embedding(t, self.cfg.emb_dim))
        te = self.time_mlp[1](tt.silu(self.time_mlp[0](tt.reshape(te, (1, self.cfg.emb_dim)))))
        ce = Tensor(flatten_cams(cams))
        ce = self.cam_mlp[1](tt.silu(self.cam_mlp[0](ce)))
        return te + ce  # (V, emb)

    def __call__(
        self,
        latents,
        t: float,
        cams,
        want_features: bool = False,
        kv_record: list | None = None,
        kv_inject: list | None = None,
        kv_share: set | None = None,
        capture_attn: bool = False,
    ):
        """Predict per-view eps; optionally also the drag feature map.

        kv_record collects (K, V) arrays per attention layer; kv_inject
        supplies them, applied only at the layers whose 1-based position is
        in kv_share.
        """
        x = latents if isinstance(latents, Tensor) else Tensor(latents)
        v, c, h, w = x.shape
        if v != self.cfg.views:
            raise ValueError(f"expected {self.cfg.views} views, got {v}")
        if len(cams) != v:
            raise ValueError(f"got {v} views but {len(cams)} cameras")
        if h % 4 or w % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {h}x{w}")
        emb = self.embed(t, cams)

        attn_pos = {id(a): i + 1 for i, a in enumerate(self.attention_layers())}

        def run_attn(layer, hidden):
            pos = attn_pos[id(layer)]
            src = None
            if kv_inject is not None and kv_share is not None and pos in kv_share:
                src = kv_inject[pos - 1]
            return layer(hidden, kv_source=src, record=kv_record, capture=capture_attn)

        h0 = self.enc0(self.conv_in(x), emb)
        h1 = self.enc1(self.down0(h0), emb)
        h1 = run_attn(self.attn_enc1, h1)
        h2 = self.mid1(self.down1(h1), emb)
        h2 = run_attn(self.attn_mid, h2)
        h2 = self.mid2(h2, emb)
        u1 = self.up1(tt.upsample_nearest(h2))
        u1 = self.dec1(tt.concat([u1, h1], axis=1), emb)
        u1 = run_attn(self.attn_dec1, u1)
        u0 = self.up0(tt.upsample_nearest(u1))
        u0 = self.dec0(tt.concat([u0, h0], axis=1), emb)
        eps = self.conv_out(tt.silu(self.norm_out(u0)))

        if not want_features:
            return eps
        # feature map for motion supervision / tracking: second-to-last decoder
        # block output, bilinearly upsampled to latent resolution
        feats = [tt.resize_bilinear(tt.tslice(u1, (i,)), h, w) for i in range(v)]
        stacked = tt.concat([tt.reshape(f, (1,) + f.shape) for f in feats], axis=0)
        return eps, stacked

    # -- persistence -----------------------------------------------------------

    def save(self, path, schedule=None, extra=None):
        from .checkpoint import save_checkpoint

        save_checkpoint(
            path,
            kind="denoiser",
            arch=self.cfg.to_json(),
            schedule=schedule.to_json() if schedule is not None else None,
            params=self.named_parameters(),
            extra=extra or {},
        )

    @classmethod
    def load(cls, path):
        from .checkpoint import load_checkpoint
        from .schedule import NoiseSchedule

        blob = load_checkpoint(path)
        if blob["kind"] != "denoiser":
            raise ValueError(f"checkpoint kind {blob['kind']!r} is not a denoiser")
        net = cls(ArchConfig.from_json(blob["arch"]))
        params = net.named_parameters()
        if set(params) != set(blob["params"]):
            raise ValueError("checkpoint parameter names do not match architecture")
        for name, tensor in params.items():
            tensor.data = blob["params"][name].astype(np.float32).reshape(tensor.shape)
        schedule = NoiseSchedule.from_json(blob["schedule"]) if blob["schedule"] else None
        return net, schedule, blob.get("extra", {})


def tslice_view(x: Tensor, i: int) -> Tensor:
    return tt.tslice(x, (i,))
