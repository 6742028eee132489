"""Photorealistic static map: 3D Gaussians with a depth-sorted compositor."""

from .gradients import LossBreakdown, NoStaticPixels, ParamGradients, loss_and_gradients, masked_l1_loss
from .model import (
    GaussianMap,
    MapConfig,
    MapFormatError,
    insert_from_features,
    load_map,
    load_map_text,
    prune,
    save_map,
    save_map_text,
)
from .optimize import Keyframe, OptimizeConfig, OptimizeResult, optimize_map, select_window
from .render import (
    ProjectedGaussians,
    RenderConfig,
    RenderOutput,
    project_gaussians,
    render_brute_force,
    render_depth_for_background,
    render_map,
    render_tiled,
    rotation_matrices,
)

__all__ = [
    "GaussianMap",
    "Keyframe",
    "LossBreakdown",
    "MapConfig",
    "MapFormatError",
    "NoStaticPixels",
    "OptimizeConfig",
    "OptimizeResult",
    "ParamGradients",
    "ProjectedGaussians",
    "RenderConfig",
    "RenderOutput",
    "insert_from_features",
    "load_map",
    "load_map_text",
    "loss_and_gradients",
    "masked_l1_loss",
    "optimize_map",
    "project_gaussians",
    "prune",
    "render_brute_force",
    "render_depth_for_background",
    "render_map",
    "render_tiled",
    "rotation_matrices",
    "save_map",
    "save_map_text",
    "select_window",
]
