"""Train the shipped toy checkpoint, snapshotting every 1000 steps."""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

import numpy as np

from dragsplat.denoiser import ArchConfig, MultiViewDenoiser
from dragsplat.pretrain import PretrainConfig, make_dataset, pretrain_mv
from dragsplat.schedule import make_schedule

OUT = Path(__file__).parent.parent / "checkpoints"
OUT.mkdir(exist_ok=True)

STEPS = 5000
SNAP = 1000

schedule = make_schedule(1000)
cfg = PretrainConfig(
    steps=STEPS, image_size=32, pool_scenes=32, seed=0, learning_rate=2e-3,
    low_t_fraction=0.35, low_t_max=100, jitter_prob=0.5, jitter_std=0.03,
)
# 48px scenes keep the net scale-agnostic; 64px training blows the memory budget
data = make_dataset(32, 32, seed=0) + make_dataset(8, 48, seed=7)

net = MultiViewDenoiser(ArchConfig(), seed=0)
t0 = time.time()
done = 0
losses_all = []

while done < STEPS:
    chunk = min(SNAP, STEPS - done)
    cfg.steps = chunk
    cfg.seed = done  # distinct draw stream per chunk, deterministic overall
    net, losses = pretrain_mv(data, chunk, schedule, cfg, net=net,
                              step_hook=lambda step, loss: print(f"step {done+step}: loss {loss:.4f}", flush=True))
    losses_all += losses
    done += chunk
    net.save(OUT / f"toy_mv_step{done}.ckpt", schedule=schedule,
             extra={"steps": done, "loss": float(np.mean(losses_all[-100:]))})
    print(f"snapshot at {done} ({time.time()-t0:.0f}s)", flush=True)

net.save(OUT / "toy_mv_final.ckpt", schedule=schedule,
         extra={"steps": STEPS, "loss": float(np.mean(losses_all[-100:]))})
print(f"done in {time.time()-t0:.0f}s, final loss {np.mean(losses_all[-100:]):.4f}")
