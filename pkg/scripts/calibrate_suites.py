"""Measure the empirical acceptance suites against a checkpoint."""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

import numpy as np

from dragsplat import lora as lora_mod
from dragsplat.denoiser import MultiViewDenoiser
from dragsplat.drag import DragConfig, run_drag
from dragsplat.scenes import drag_case, scene_views
from dragsplat.schedule import invert_loop, sample_loop
from dragsplat.tensor import no_grad

ckpt = sys.argv[1] if len(sys.argv) > 1 else "checkpoints/toy_mv_final.ckpt"
net, schedule, extra = MultiViewDenoiser.load(ckpt)
print(f"checkpoint {ckpt}: {extra}")

which = sys.argv[2] if len(sys.argv) > 2 else "all"

if which in ("all", "roundtrip"):
    for size in (32, 64):
        views, cams = scene_views(901, size=size)
        with no_grad():
            eps_fn = lambda x, t: net(x, t, cams).data
            t0 = time.time()
            traj = invert_loop(eps_fn, views, schedule, 50, refine_steps=8, refine_tol=1e-5)
            x = sample_loop(eps_fn, traj[schedule.steps], schedule, 50)
        err = np.abs(x - views)
        print(f"roundtrip size {size}: L-inf {err.max():.4f} mean {err.mean():.5f} ({time.time()-t0:.0f}s)", flush=True)

if which in ("all", "drag"):
    t0 = time.time()
    wins = 0
    for seed in range(20):
        case = drag_case(3000 + seed, size=32)
        d0 = np.mean([np.linalg.norm(h - g) for h, g in zip(case.handles0, case.targets)])
        ts = time.time()
        res = run_drag(net, schedule, case.views, case.cams, case.handles0, case.targets, case.masks, DragConfig())
        d1 = np.mean([np.linalg.norm(h - g) for h, g in zip(res.handles, case.targets)])
        wins += d1 < d0
        print(f"  drag seed {seed}: {d0:.2f} -> {d1:.2f} px, iters {len(res.telemetry)}, conv {res.converged}, {time.time()-ts:.0f}s", flush=True)
    print(f"drag progress: {wins}/20 improved in {time.time()-t0:.0f}s", flush=True)

if which in ("all", "ablation"):
    t0 = time.time()
    wins = 0
    for seed in range(20):
        case = drag_case(7000 + seed, size=16)
        cfg = DragConfig(max_iters=30)
        off = (1.0 - case.masks)[:, None, :, :]

        def run_once(with_lora):
            if with_lora:
                lcfg = lora_mod.FinetuneConfig(steps=60, rank=16, seed=seed)
                lora_mod.finetune_identity(net, case.views, case.cams, lcfg, schedule)
            try:
                res = run_drag(net, schedule, case.views, case.cams, case.handles0, case.targets, case.masks, cfg)
            finally:
                if with_lora:
                    lora_mod.detach(net)
            return float((np.abs(res.edited - res.reconstruction) * off).sum() / max(off.sum() * 3, 1))

        w = run_once(True)
        wo = run_once(False)
        wins += w <= wo
        print(f"  ablation seed {seed}: with {w:.4f} vs without {wo:.4f} -> {'win' if w <= wo else 'loss'}", flush=True)
    print(f"ablation: {wins}/20 in {time.time()-t0:.0f}s", flush=True)
