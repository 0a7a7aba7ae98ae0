"""Command line for the whole pipeline: pretrain, render, lora, drag,
refit, the headless end-to-end `pipeline`, and `serve`.

All commands take --config (TOML) plus repeated --set section.key=value
overrides; failures exit nonzero with one JSON error object on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import lora as lora_mod
from .cameras import PointPick, cloud_extent, default_rig, project, rasterize_mask
from .config import AppConfig, load_config
from .denoiser import MultiViewDenoiser
from .drag import run_drag
from .gaussians import load_ply, save_ply
from .pretrain import pretrain_toy
from .refit import refit
from .render import RenderedImage, render, render_views
from .schedule import make_schedule


def fail(code: str, message: str, exit_code: int = 1):
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    raise SystemExit(exit_code)


def config_options(f):
    @click.option("--config", "config_path", type=click.Path(exists=True), default=None, help="TOML config file")
    @click.option("--set", "overrides", multiple=True, help="override: section.key=value")
    @functools.wraps(f)
    def wrapper(*args, config_path=None, overrides=(), **kwargs):
        try:
            cfg = load_config(config_path, overrides)
        except Exception as exc:
            fail("bad_config", str(exc), 2)
        return f(*args, cfg=cfg, **kwargs)

    return wrapper


def guarded(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SystemExit:
            raise
        except Exception as exc:
            fail(type(exc).__name__, str(exc))

    return wrapper


@click.group()
def main():
    """Drag-editing workbench for 3D Gaussian splat scenes."""


@main.command()
@config_options
@guarded
@click.option("--out", type=click.Path(), required=True, help="checkpoint path")
@click.option("--steps", type=int, default=None)
@click.option("--size", type=int, default=None)
@click.option("--seed", type=int, default=None)
def pretrain(cfg: AppConfig, out, steps, size, seed):
    """Train the toy multi-view denoiser on procedural scenes."""
    if steps is not None:
        cfg.pretrain.steps = steps
    if size is not None:
        cfg.pretrain.image_size = size
    if seed is not None:
        cfg.pretrain.seed = seed
    schedule = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)

    def hook(step, loss):
        click.echo(f"step {step}: loss {loss:.4f}")

    net, schedule, losses = pretrain_toy(cfg.pretrain, schedule, step_hook=hook)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    net.save(out, schedule=schedule, extra={"final_loss": losses[-1], "steps": cfg.pretrain.steps})
    click.echo(f"saved {out} (final loss {losses[-1]:.4f})")


@main.command(name="render")
@config_options
@guarded
@click.option("--ply", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="output directory")
@click.option("--splat-size", type=float, default=1.0)
def render_cmd(cfg: AppConfig, ply, out, splat_size):
    """Render the default 4-view rig of a splat PLY to PNGs."""
    cloud = load_ply(ply)
    center, extent = cloud_extent(cloud)
    cams = default_rig(center, extent, width=cfg.render.width, height=cfg.render.height, n=cfg.render.n_views)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        img = render(cloud, cam, background=cfg.render.background, splat_scale=splat_size)
        img.save_png(outdir / f"view{i}.png")
        (outdir / f"camera{i}.json").write_text(json.dumps(cam.to_json()))
    click.echo(f"rendered {len(cams)} views to {outdir}")


def _load_backbone(ckpt):
    net, schedule, _ = MultiViewDenoiser.load(ckpt)
    if schedule is None:
        raise ValueError("checkpoint carries no schedule")
    return net, schedule


def _session_geometry(cfg, cloud):
    center, extent = cloud_extent(cloud)
    return default_rig(
        center, extent, width=cfg.render.width, height=cfg.render.height, n=cfg.render.n_views
    )


@main.command()
@config_options
@guarded
@click.option("--ply", type=click.Path(exists=True), required=True)
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="adapter checkpoint path")
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
def lora(cfg: AppConfig, ply, ckpt, out, steps, seed):
    """Identity-preserving LoRA fine-tune on the scene's 4 renders."""
    if steps is not None:
        cfg.lora.steps = steps
    if seed is not None:
        cfg.lora.seed = seed
    net, schedule = _load_backbone(ckpt)
    cloud = load_ply(ply)
    cams = _session_geometry(cfg, cloud)
    views = render_views(cloud, cams, background=cfg.render.background)
    adapters, losses = lora_mod.finetune_identity(net, views, cams, cfg.lora, schedule)
    lora_mod.save_adapters(out, adapters, cfg.lora)
    click.echo(f"saved adapters to {out} (final loss {losses[-1] if losses else float('nan'):.4f})")


def _load_picks(path):
    doc = json.loads(Path(path).read_text())
    if "starts" not in doc or "ends" not in doc:
        raise ValueError("picks file needs 'starts' and 'ends'")
    return doc


def _drag_once(cfg, net, schedule, cloud, cams, picks_doc, telemetry_path=None):
    pick = PointPick(picks_doc["starts"], picks_doc["ends"]).snapped_to(cloud, tol=1e-3)
    if picks_doc.get("mask"):
        cloud.set_mask(picks_doc["mask"])
    views = render_views(cloud, cams, background=cfg.render.background)
    handles0 = [project(pick.starts, cam) for cam in cams]
    targets = [project(pick.ends, cam) for cam in cams]
    masks = np.stack([rasterize_mask(cloud, cam) for cam in cams]).astype(np.float32)
    tele_f = open(telemetry_path, "w") if telemetry_path else None

    def cb(rec):
        if tele_f:
            tele_f.write(json.dumps(rec) + "\n")

    try:
        result = run_drag(net, schedule, views, cams, handles0, targets, masks, cfg.drag, telemetry_cb=cb)
    finally:
        if tele_f:
            tele_f.close()
    return result


@main.command()
@config_options
@guarded
@click.option("--ply", type=click.Path(exists=True), required=True)
@click.option("--picks", "picks_path", type=click.Path(exists=True), required=True)
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--adapters", "adapters_path", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True, help="output directory")
@click.option("--max-iters", type=int, default=None)
def drag(cfg: AppConfig, ply, picks_path, ckpt, adapters_path, out, max_iters):
    """Multi-view drag edit; writes edited PNGs + telemetry JSONL."""
    if max_iters is not None:
        cfg.drag.max_iters = max_iters
    net, schedule = _load_backbone(ckpt)
    if adapters_path:
        lora_mod.load_adapters(adapters_path, net)
    cloud = load_ply(ply)
    cams = _session_geometry(cfg, cloud)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    result = _drag_once(cfg, net, schedule, cloud, cams, _load_picks(picks_path), outdir / "telemetry.jsonl")
    np.save(outdir / "edited_views.npy", result.edited)
    for v in range(result.edited.shape[0]):
        RenderedImage(
            rgb=result.edited[v].transpose(1, 2, 0), alpha=np.ones(result.edited[v].shape[1:])
        ).save_png(outdir / f"edited_view{v}.png")
    click.echo(
        f"drag finished: {len(result.telemetry)} iterations, converged={result.converged}, outputs in {outdir}"
    )


@main.command(name="refit")
@config_options
@guarded
@click.option("--ply", type=click.Path(exists=True), required=True)
@click.option("--views", "views_path", type=click.Path(exists=True), required=True, help="edited_views.npy")
@click.option("--mask", "mask_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="output PLY")
@click.option("--iterations", type=int, default=None)
def refit_cmd(cfg: AppConfig, ply, views_path, mask_path, out, iterations):
    """Fine-tune masked Gaussians against edited views."""
    from .gaussians import load_mask

    if iterations is not None:
        cfg.refit.iterations = iterations
    cloud = load_ply(ply)
    cloud.set_mask(load_mask(mask_path))
    cams = _session_geometry(cfg, cloud)
    edited = np.load(views_path)
    trace_path = Path(out).with_suffix(".trace.jsonl")
    with open(trace_path, "w") as tf:
        new_cloud, losses = refit(
            cloud, edited, cams, cfg.refit,
            progress_cb=lambda it, loss: tf.write(json.dumps({"iter": it, "loss": loss}) + "\n"),
        )
    save_ply(new_cloud, out)
    click.echo(f"refit done: loss {losses[0]:.5f} -> {losses[-1]:.5f}, wrote {out}")


@main.command()
@config_options
@guarded
@click.option("--ply", type=click.Path(exists=True), required=True)
@click.option("--picks", "picks_path", type=click.Path(exists=True), required=True)
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
def pipeline(cfg: AppConfig, ply, picks_path, ckpt, out, seed):
    """Headless LoRA -> drag -> refit, end to end."""
    cfg.lora.seed = seed
    cfg.refit.seed = seed
    net, schedule = _load_backbone(ckpt)
    cloud = load_ply(ply)
    picks_doc = _load_picks(picks_path)
    if picks_doc.get("mask"):
        cloud.set_mask(picks_doc["mask"])
    if cloud.mask is None or len(cloud.mask) == 0:
        fail("EMPTY_MASK", "picks file has no mask indices; refit would be a no-op")
    cams = _session_geometry(cfg, cloud)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)

    views = render_views(cloud, cams, background=cfg.render.background)
    click.echo(f"[1/3] lora: {cfg.lora.steps} steps")
    adapters, _ = lora_mod.finetune_identity(net, views, cams, cfg.lora, schedule)
    lora_mod.save_adapters(outdir / "adapters.ckpt", adapters, cfg.lora)

    click.echo(f"[2/3] drag: up to {cfg.drag.max_iters} iterations")
    result = _drag_once(cfg, net, schedule, cloud, cams, picks_doc, outdir / "telemetry.jsonl")
    np.save(outdir / "edited_views.npy", result.edited)
    for v in range(result.edited.shape[0]):
        RenderedImage(
            rgb=result.edited[v].transpose(1, 2, 0), alpha=np.ones(result.edited[v].shape[1:])
        ).save_png(outdir / f"edited_view{v}.png")

    click.echo(f"[3/3] refit: {cfg.refit.iterations} iterations")
    with open(outdir / "refit_trace.jsonl", "w") as tf:
        new_cloud, losses = refit(
            cloud, result.edited, cams, cfg.refit,
            progress_cb=lambda it, loss: tf.write(json.dumps({"iter": it, "loss": loss}) + "\n"),
        )
    save_ply(new_cloud, outdir / "edited.ply")
    click.echo(f"pipeline done: {outdir}/edited.ply (refit loss {losses[0]:.5f} -> {losses[-1]:.5f})")


@main.command()
@config_options
@guarded
@click.option("--port", type=int, default=None)
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--ckpt", type=click.Path(exists=True), default=None)
def serve(cfg: AppConfig, port, data_dir, ckpt):
    """Run the session service (see README for the UI)."""
    import os

    from .server import serve as run_server

    if port is not None:
        cfg.server.port = port
    if data_dir is not None:
        cfg.server.data_dir = data_dir
    if ckpt is not None:
        cfg.server.checkpoint = ckpt
    cfg.server.port = int(os.environ.get("DRAGSPLAT_PORT", cfg.server.port))
    cfg.server.data_dir = os.environ.get("DRAGSPLAT_DATA", cfg.server.data_dir)
    run_server(cfg)


if __name__ == "__main__":
    main()
