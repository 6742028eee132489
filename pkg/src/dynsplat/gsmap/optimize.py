"""Stochastic refinement of the Gaussian map over a keyframe window."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Intrinsics, Pose
from .gradients import NoStaticPixels, ParamGradients, loss_and_gradients
from .model import GaussianMap, LOG_SCALE_MAX, LOG_SCALE_MIN, MapConfig, prune
from .render import RenderConfig


@dataclass
class Keyframe:
    frame_index: int
    pose: Pose  # world to camera
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), 0 where invalid
    static_mask: np.ndarray  # (H, W) bool, True where scene is static


@dataclass
class OptimizeConfig:
    iterations: int = 150
    window_size: int = 8  # newest keyframe plus random older ones
    method: str = "adam"  # or "sgd"
    lambda_depth: float = 0.7
    scene_extent: float = 3.0  # meters; scales the position step
    lr_position: float = 2e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizeResult:
    losses: list[float] = field(default_factory=list)
    n_skipped: int = 0
    n_pruned: int = 0


def _learning_rates(cfg: OptimizeConfig) -> dict[str, float]:
    return {
        "positions": cfg.lr_position * cfg.scene_extent,
        "opacity_logits": cfg.lr_opacity,
        "log_scales": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "colors": cfg.lr_color,
    }


def _adam_step(gmap: GaussianMap, grads: ParamGradients, lrs: dict[str, float], cfg: OptimizeConfig) -> None:
    t = gmap.step_count + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, lr in lrs.items():
        g = getattr(grads, name)
        if name not in gmap.moments:
            gmap.moments[name] = (np.zeros_like(g), np.zeros_like(g))
        m, v = gmap.moments[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        param = getattr(gmap, name)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def _sgd_step(gmap: GaussianMap, grads: ParamGradients, lrs: dict[str, float]) -> None:
    for name, lr in lrs.items():
        getattr(gmap, name)[...] -= lr * getattr(grads, name)


def _project_constraints(gmap: GaussianMap) -> None:
    """Keep parameters inside their valid ranges after a gradient step."""
    np.clip(gmap.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=gmap.log_scales)
    np.clip(gmap.colors, 0.0, 1.0, out=gmap.colors)
    norms = np.linalg.norm(gmap.rotations, axis=1, keepdims=True)
    gmap.rotations /= np.maximum(norms, 1e-12)


def select_window(
    keyframes: list[Keyframe], rng: np.random.Generator, window_size: int
) -> list[Keyframe]:
    """Newest keyframe plus up to window_size - 1 uniformly drawn older ones."""
    if not keyframes:
        return []
    if len(keyframes) <= window_size:
        return list(keyframes)
    older = rng.choice(len(keyframes) - 1, size=window_size - 1, replace=False)
    return [keyframes[-1]] + [keyframes[i] for i in older]


def optimize_map(
    gmap: GaussianMap,
    keyframes: list[Keyframe],
    intr: Intrinsics,
    rng: np.random.Generator,
    cfg: OptimizeConfig,
    render_cfg: RenderConfig,
    map_cfg: MapConfig,
    iterations: int | None = None,
) -> OptimizeResult:
    """Run stochastic refinement steps against a sampled keyframe window.

    Each iteration picks one keyframe uniformly from the window, renders it,
    and applies one optimizer step to every parameter group. Periodically
    Gaussians whose opacity collapsed are pruned, moment buffers included.
    Frames whose static mask is empty are skipped and counted.
    """
    result = OptimizeResult()
    window = select_window(keyframes, rng, cfg.window_size)
    if not window or len(gmap) == 0:
        return result
    lrs = _learning_rates(cfg)
    n_iter = cfg.iterations if iterations is None else iterations
    for _ in range(n_iter):
        kf = window[int(rng.integers(len(window)))]
        try:
            loss, grads = loss_and_gradients(
                gmap,
                kf.pose,
                intr,
                kf.color,
                kf.depth,
                kf.static_mask,
                render_cfg,
                cfg.lambda_depth,
            )
        except NoStaticPixels:
            result.n_skipped += 1
            continue
        if cfg.method == "adam":
            _adam_step(gmap, grads, lrs, cfg)
        elif cfg.method == "sgd":
            _sgd_step(gmap, grads, lrs)
        else:
            raise ValueError(f"unknown optimizer method {cfg.method!r}")
        _project_constraints(gmap)
        gmap.step_count += 1
        result.losses.append(loss.total)
        if gmap.step_count % map_cfg.prune_interval == 0:
            result.n_pruned += prune(gmap, map_cfg.prune_opacity)
    return result
