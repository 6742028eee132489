"""Moving-object evidence: optical flow, mask fusion, and a per-pixel
background depth model that refines raw masks by depth consistency.

Mask convention everywhere: uint8, 1 = static, 0 = dynamic.

The background model B holds, per pixel, a running estimate of the depth of
the static scene behind whatever is currently in front of it. Each frame it
blends three sources: its own history, depth rendered from the static map at
the predicted pose, and the observed depth wherever the raw mask calls the
pixel static. A pixel of the current frame is then re-labeled static only if
enough samples of the observed depth in its neighborhood agree with B, which
recovers mover pixels that the raw mask missed and forgives small projection
misalignments near depth edges.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .imageops import resize_by_scale, resize_to, warp_image


@dataclass
class DynprocConfig:
    # flow
    flow_threshold: float = 1.0  # on squared magnitude u^2 + v^2, px^2/frame^2
    flow_levels: int = 3
    flow_window: int = 7
    flow_iterations: int = 3
    flow_min_eigenvalue: float = 1e-4  # on the summed structure tensor
    # background model
    tau: float = 0.2  # weight of depth rendered from the map
    rho: float = 0.6  # weight of observed static depth
    faithful_blend: bool = False  # keep the written-form blend at masked pixels
    # refinement
    sigma_m: float = 0.2  # depth agreement threshold, meters
    n_m: int = 9  # strict count threshold: static needs count > n_m
    refine_radius: int = 2  # window is (2r+1)^2 including the center


@dataclass
class FlowField:
    u: np.ndarray  # (H, W) horizontal displacement, px
    v: np.ndarray  # (H, W) vertical displacement, px
    valid: np.ndarray  # (H, W) bool

    @property
    def squared_magnitude(self) -> np.ndarray:
        return self.u**2 + self.v**2


@dataclass
class BackgroundModel:
    depth: np.ndarray  # (H, W) float64 meters; meaningful only where observed
    observed: np.ndarray  # (H, W) bool


# ---------------------------------------------------------------------------
# Optical flow (pyramidal windowed least squares)
# ---------------------------------------------------------------------------


def _window_sum(image: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(image, size=size, mode="nearest") * (size * size)


def compute_flow(prev_gray: np.ndarray, curr_gray: np.ndarray, cfg: DynprocConfig) -> FlowField:
    """Dense displacement from prev to curr.

    Coarse-to-fine over a factor-2 pyramid; at each level the brightness
    constancy constraint is solved in closed form over a square window, a few
    warp-and-refine iterations per level. Validity comes from the smaller
    eigenvalue of the level-0 structure tensor: windows without gradient
    structure cannot constrain flow.
    """
    prev_gray = np.asarray(prev_gray, dtype=np.float64)
    curr_gray = np.asarray(curr_gray, dtype=np.float64)
    if prev_gray.shape != curr_gray.shape:
        raise ValueError("frame size mismatch")

    pyr_prev = [prev_gray]
    pyr_curr = [curr_gray]
    for _ in range(cfg.flow_levels - 1):
        pyr_prev.append(resize_by_scale(ndimage.gaussian_filter(pyr_prev[-1], 1.0, mode="nearest"), 2.0))
        pyr_curr.append(resize_by_scale(ndimage.gaussian_filter(pyr_curr[-1], 1.0, mode="nearest"), 2.0))

    u = np.zeros_like(pyr_prev[-1])
    v = np.zeros_like(pyr_prev[-1])
    win = cfg.flow_window
    for level in range(cfg.flow_levels - 1, -1, -1):
        ref = pyr_prev[level]
        tgt = pyr_curr[level]
        if u.shape != ref.shape:
            u = resize_to(u, ref.shape) * 2.0
            v = resize_to(v, ref.shape) * 2.0
        grad_y, grad_x = np.gradient(ref)
        sxx = _window_sum(grad_x * grad_x, win)
        sxy = _window_sum(grad_x * grad_y, win)
        syy = _window_sum(grad_y * grad_y, win)
        det = sxx * syy - sxy * sxy
        # Gate on the same eigenvalue bound the final validity mask uses.
        # Windows between det > 0 and that bound are ill conditioned: their
        # updates blow up over iterations, and the garbage both pollutes
        # neighboring window sums and scatters the warp lookups.
        trace = sxx + syy
        disc = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy)
        solvable = (det > 1e-12) & (0.5 * (trace - disc) >= cfg.flow_min_eigenvalue)
        det_safe = np.where(solvable, det, 1.0)
        limit = float(np.hypot(ref.shape[0], ref.shape[1]))
        for _ in range(cfg.flow_iterations):
            warped = warp_image(tgt, u, v)
            grad_t = warped - ref
            sxt = _window_sum(grad_x * grad_t, win)
            syt = _window_sum(grad_y * grad_t, win)
            du = -(syy * sxt - sxy * syt) / det_safe
            dv = -(sxx * syt - sxy * sxt) / det_safe
            u = np.clip(u + np.where(solvable, du, 0.0), -limit, limit)
            v = np.clip(v + np.where(solvable, dv, 0.0), -limit, limit)

    # validity from the finest-level structure tensor
    trace = sxx + syy
    disc = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy)
    eig_min = 0.5 * (trace - disc)
    valid = eig_min >= cfg.flow_min_eigenvalue
    return FlowField(u=u, v=v, valid=valid)


def motion_mask(flow: FlowField, cfg: DynprocConfig) -> np.ndarray:
    """1 = static. Dynamic where valid flow has squared magnitude above the
    threshold; invalid flow carries no motion evidence and stays static."""
    moving = flow.valid & (flow.squared_magnitude > cfg.flow_threshold)
    return (~moving).astype(np.uint8)


def combine_raw(segment_mask: np.ndarray, motion: np.ndarray) -> np.ndarray:
    """Static only where both sources agree it is static (dynamic is a union)."""
    return (segment_mask.astype(bool) & motion.astype(bool)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Background depth model
# ---------------------------------------------------------------------------


def init_background(depth: np.ndarray, raw_mask: np.ndarray) -> BackgroundModel:
    """Bootstrap from the first frame: adopt depth at raw-static valid pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    observed = (raw_mask.astype(bool)) & (depth > 0)
    return BackgroundModel(depth=np.where(observed, depth, 0.0), observed=observed)


def update_background(
    model: BackgroundModel,
    depth: np.ndarray,
    raw_mask: np.ndarray,
    rendered_depth: np.ndarray | None,
    cfg: DynprocConfig,
) -> BackgroundModel:
    """One recursive blend step. Returns a new model; the input is not touched.

    Per observed pixel the update is a convex blend of history, rendered
    depth (weight tau) and observed static depth (weight rho). By default a
    missing source hands its weight back to history, keeping the blend
    normalized; with cfg.faithful_blend the weights stay fixed and missing
    terms contribute zero. Unobserved pixels adopt the first available
    source outright (observed depth preferred over rendered).
    """
    depth = np.asarray(depth, dtype=np.float64)
    has_render = rendered_depth is not None
    rend = np.asarray(rendered_depth, dtype=np.float64) if has_render else np.zeros_like(depth)
    r_ok = (rend > 0) if has_render else np.zeros_like(depth, dtype=bool)
    o_ok = raw_mask.astype(bool) & (depth > 0)

    if cfg.faithful_blend:
        w_hist = np.full(depth.shape, 1.0 - cfg.tau - cfg.rho)
        w_rend = np.where(r_ok, cfg.tau, 0.0)
        w_obs = np.where(o_ok, cfg.rho, 0.0)
    else:
        w_rend = np.where(r_ok, cfg.tau, 0.0)
        w_obs = np.where(o_ok, cfg.rho, 0.0)
        w_hist = 1.0 - w_rend - w_obs

    new_depth = np.where(
        model.observed,
        w_hist * model.depth + w_rend * rend + w_obs * depth,
        np.where(o_ok, depth, np.where(r_ok, rend, 0.0)),
    )
    new_observed = model.observed | o_ok | r_ok
    new_depth = np.where(new_observed, new_depth, 0.0)
    return BackgroundModel(depth=new_depth, observed=new_observed)


def refine_mask(
    model: BackgroundModel,
    depth: np.ndarray,
    raw_mask: np.ndarray,
    cfg: DynprocConfig,
) -> np.ndarray:
    """Depth-consistency vote against the background model.

    A pixel is static iff strictly more than n_m samples of the observed
    depth within its (2r+1)^2 window (center included) lie within sigma_m of
    B at the pixel. Invalid-depth and out-of-bounds samples never count.
    Pixels where B is unobserved fall back to the raw mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    r = cfg.refine_radius
    h, w = depth.shape
    padded = np.zeros((h + 2 * r, w + 2 * r))
    padded[r : r + h, r : r + w] = depth  # zero padding = invalid samples
    count = np.zeros((h, w), dtype=np.int32)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            sample = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            agree = (sample > 0) & (np.abs(model.depth - sample) < cfg.sigma_m)
            count += agree
    static = count > cfg.n_m
    refined = np.where(model.observed, static, raw_mask.astype(bool))
    return refined.astype(np.uint8)


def bootstrap_config(cfg: DynprocConfig) -> DynprocConfig:
    """Variant used before the map produces renders: the tau source cannot
    exist yet, so treat tau as zero rather than letting faithful mode decay."""
    return replace(cfg, tau=0.0)
