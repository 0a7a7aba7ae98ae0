"""Drag-based editing workbench for 3D Gaussian splat scenes.

Functions sharing a submodule's name (render.render, refit.refit) are not
re-exported at the top level; import them from their module.
"""

from .cameras import CameraPose, PointPick, default_rig, project, rasterize_mask
from .config import AppConfig, load_config
from .denoiser import ArchConfig, MultiViewDenoiser
from .drag import DragConfig, DragResult, run_drag
from .gaussians import GaussianCloud, load_ply, make_cloud, save_ply
from .lora import FinetuneConfig, attach, detach, finetune_identity
from .refit import RefitConfig, psnr, ssim
from .render import RenderedImage, render_views, splat
from .schedule import NoiseSchedule, ddim_invert_step, ddim_sample_step, make_schedule
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "ArchConfig",
    "CameraPose",
    "DragConfig",
    "DragResult",
    "FinetuneConfig",
    "GaussianCloud",
    "MultiViewDenoiser",
    "NoiseSchedule",
    "PointPick",
    "RefitConfig",
    "RenderedImage",
    "Tensor",
    "attach",
    "ddim_invert_step",
    "ddim_sample_step",
    "default_rig",
    "detach",
    "finetune_identity",
    "load_config",
    "load_ply",
    "make_cloud",
    "make_schedule",
    "project",
    "psnr",
    "rasterize_mask",
    "render_views",
    "run_drag",
    "save_ply",
    "splat",
    "ssim",
]
