import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from dragsplat import gaussians as G
from dragsplat.cli import main
from dragsplat.config import load_config
from dragsplat.scenes import random_cloud

TINY = Path(__file__).parent / ".cache" / "tiny_net_v1.ckpt"


@pytest.fixture()
def workdir(tmp_path, tiny_net):
    cloud = random_cloud(23)
    G.save_ply(cloud, tmp_path / "scene.ply")
    picks = {
        "starts": [cloud.mu[4].tolist()],
        "ends": [(cloud.mu[4] + [0.15, 0.0, 0.05]).tolist()],
        "mask": [int(i) for i in range(cloud.count) if np.linalg.norm(cloud.mu[i] - cloud.mu[4]) < 0.15],
    }
    (tmp_path / "picks.json").write_text(json.dumps(picks))
    return tmp_path


def run(args, **kw):
    return CliRunner().invoke(main, args, **kw)


def test_default_config_echoes_reported_values():
    cfg = load_config()
    assert cfg.lora.steps == 300
    assert cfg.lora.learning_rate == 5e-4
    assert cfg.drag.max_iters == 80
    assert cfg.drag.r1 == 1 and cfg.drag.r2 == 3
    assert cfg.drag.lam == 0.1
    assert cfg.drag.latent_lr == 0.01
    assert cfg.drag.ddim_steps == 50
    assert cfg.drag.guidance_scale == 1.0
    assert cfg.lora.views == 4
    assert cfg.refit.iterations == 5000


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "cfg.toml"
    p.write_text("[drag]\nmax_iters = 7\n\n[lora]\nsteps = 11\n")
    cfg = load_config(p, overrides=["drag.r2=5"])
    assert cfg.drag.max_iters == 7 and cfg.lora.steps == 11 and cfg.drag.r2 == 5
    with pytest.raises(ValueError, match="unknown"):
        load_config(p, overrides=["drag.nonsense=1"])
    with pytest.raises(ValueError, match="form"):
        load_config(None, overrides=["gibberish"])


def test_render_command(workdir):
    out = workdir / "renders"
    r = run(["render", "--ply", str(workdir / "scene.ply"), "--out", str(out), "--set", "render.width=16", "--set", "render.height=16"])
    assert r.exit_code == 0, r.output + str(r.exception)
    assert sorted(p.name for p in out.glob("view*.png")) == ["view0.png", "view1.png", "view2.png", "view3.png"]
    assert (out / "camera0.json").exists()


def test_drag_max_iters_one_gives_single_telemetry_record(workdir):
    out = workdir / "dragout"
    r = run(
        [
            "drag", "--ply", str(workdir / "scene.ply"), "--picks", str(workdir / "picks.json"),
            "--ckpt", str(TINY), "--out", str(out), "--max-iters", "1",
            "--set", "render.width=16", "--set", "render.height=16",
        ]
    )
    assert r.exit_code == 0, r.output + str(r.exception)
    lines = [l for l in (out / "telemetry.jsonl").read_text().splitlines() if l.strip()]
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["iter"] == 0 and "loss" in rec and "per_view" in rec


def test_cli_errors_are_machine_readable(workdir):
    r = run(["drag", "--ply", str(workdir / "scene.ply"), "--picks", str(workdir / "picks.json"), "--ckpt", str(TINY), "--out", "/nonexistent-dir/x", "--set", "bad.key=1"])
    assert r.exit_code != 0
    err = json.loads(r.stderr.strip().splitlines()[-1])
    assert err["error"] == "bad_config"


def pipeline_args(workdir, out, seed):
    return [
        "pipeline", "--ply", str(workdir / "scene.ply"), "--picks", str(workdir / "picks.json"),
        "--ckpt", str(TINY), "--out", str(out), "--seed", str(seed),
        "--set", "render.width=16", "--set", "render.height=16",
        "--set", "lora.steps=2", "--set", "drag.max_iters=2", "--set", "refit.iterations=2",
    ]


def test_pipeline_end_to_end_and_deterministic(workdir):
    out1, out2 = workdir / "p1", workdir / "p2"
    r1 = run(pipeline_args(workdir, out1, 7))
    assert r1.exit_code == 0, r1.output + str(r1.exception)
    for name in ("edited.ply", "edited_views.npy", "telemetry.jsonl", "refit_trace.jsonl", "adapters.ckpt"):
        assert (out1 / name).exists(), name
    r2 = run(pipeline_args(workdir, out2, 7))
    assert r2.exit_code == 0
    assert (out1 / "edited.ply").read_bytes() == (out2 / "edited.ply").read_bytes()


def test_pipeline_requires_mask(workdir):
    doc = json.loads((workdir / "picks.json").read_text())
    doc["mask"] = []
    (workdir / "nomask.json").write_text(json.dumps(doc))
    r = run(
        ["pipeline", "--ply", str(workdir / "scene.ply"), "--picks", str(workdir / "nomask.json"),
         "--ckpt", str(TINY), "--out", str(workdir / "p3")]
    )
    assert r.exit_code != 0
    err = json.loads(r.stderr.strip().splitlines()[-1])
    assert err["error"] == "EMPTY_MASK"
