"""Configuration: one dataclass per pipeline stage, TOML file loading, and
dotted-path overrides. The defaults here are the reported working setup
(50 DDIM steps, guidance 1.0, LoRA 5e-4 x 300, latent lr 0.01, 80 iters,
r1=1, r2=3, lambda=0.1, 4 views).
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .drag import DragConfig
from .lora import FinetuneConfig
from .pretrain import PretrainConfig
from .refit import RefitConfig


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class RenderConfig:
    width: int = 32
    height: int = 32
    background: tuple = (0.0, 0.0, 0.0)
    elevation_deg: float = 15.0
    n_views: int = 4


@dataclass
class ServerConfig:
    port: int = 8844
    data_dir: str = "./dragsplat-data"
    checkpoint: str = ""


@dataclass
class AppConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    lora: FinetuneConfig = field(default_factory=FinetuneConfig)
    drag: DragConfig = field(default_factory=DragConfig)
    refit: RefitConfig = field(default_factory=RefitConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    server: ServerConfig = field(default_factory=ServerConfig)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}


def _coerce(current, raw):
    if isinstance(current, bool):
        return raw in (True, "true", "True", "1", 1)
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if isinstance(raw, str):
            raw = [float(v) for v in raw.split(",")]
        return tuple(raw)
    return type(current)(raw) if current is not None else raw


def apply_overrides(cfg: AppConfig, overrides) -> AppConfig:
    """Apply 'section.key=value' strings (CLI --set) onto the config."""
    for item in overrides:
        try:
            path, raw = item.split("=", 1)
            section, key = path.split(".", 1)
        except ValueError:
            raise ValueError(f"override {item!r} is not of the form section.key=value") from None
        sub = getattr(cfg, section, None)
        if sub is None or not hasattr(sub, key):
            raise ValueError(f"unknown config entry {path!r}")
        setattr(sub, key, _coerce(getattr(sub, key), raw))
    return cfg


def load_config(path=None, overrides=()) -> AppConfig:
    """Default config, optionally updated from a TOML file and override strings."""
    cfg = AppConfig()
    if path is not None:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        flat = []
        for section, entries in doc.items():
            if not isinstance(entries, dict):
                raise ValueError(f"top-level config entry {section!r} must be a table")
            for key, value in entries.items():
                sub = getattr(cfg, section, None)
                if sub is None or not hasattr(sub, key):
                    raise ValueError(f"unknown config entry {section}.{key}")
                setattr(sub, key, _coerce(getattr(sub, key), value))
    apply_overrides(cfg, overrides)
    return cfg
