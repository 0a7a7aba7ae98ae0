import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dragsplat.denoiser import ArchConfig, MultiViewDenoiser
from dragsplat.pretrain import PretrainConfig, make_dataset, pretrain_mv
from dragsplat.schedule import make_schedule

CACHE = Path(__file__).parent / ".cache"
TOY_CHECKPOINT = Path(__file__).parent.parent / "checkpoints" / "toy_mv.ckpt"


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def tiny_net(schedule):
    """Small briefly trained net for unit tests; cached on disk across runs."""
    CACHE.mkdir(exist_ok=True)
    path = CACHE / "tiny_net_v1.ckpt"
    if path.exists():
        net, _, _ = MultiViewDenoiser.load(path)
        return net
    cfg = PretrainConfig(steps=220, image_size=16, pool_scenes=6, seed=3)
    data = make_dataset(cfg.pool_scenes, cfg.image_size, cfg.seed)
    net, _ = pretrain_mv(data, cfg.steps, schedule, cfg)
    net.save(path, schedule=schedule)
    return net


@pytest.fixture(scope="session")
def toy_net():
    """(net, schedule) from the shipped checkpoint used by the acceptance suite."""
    if not TOY_CHECKPOINT.exists():
        pytest.skip("toy checkpoint missing; run `dragsplat pretrain` (see README)")
    net, sched, _ = MultiViewDenoiser.load(TOY_CHECKPOINT)
    return net, sched
