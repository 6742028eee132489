"""Depth-sorted alpha compositing of projected 3D Gaussians.

Two renderers share one projection stage, one global depth order, and one
per-pixel alpha model, so they disagree only through the tiled renderer's
transmittance cutoff:

* ``render_tiled`` bins Gaussians into screen tiles by a conservative
  bounding box and stops compositing a tile once every pixel is saturated.
* ``render_brute_force`` evaluates every Gaussian at every pixel with no
  bounding box and no cutoff, as a slow reference.

Outside the bounding box the alpha is provably below the clip floor, where
both renderers zero it exactly, so the box costs no accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Intrinsics, Pose
from .model import GaussianMap


@dataclass
class RenderConfig:
    tile_size: int = 16
    alpha_min: float = 1.0 / 255.0  # contributions below this are zeroed
    alpha_max: float = 0.999  # per-Gaussian alpha ceiling
    transmittance_min: float = 1e-6  # tiled renderer stops past this
    near_plane: float = 0.01  # meters; Gaussians at or before are culled
    background_opacity_threshold: float = 0.5  # accumulated-alpha floor for depth reuse
    dilation: float = 0.3  # isotropic pixel-space covariance floor


@dataclass
class ProjectedGaussians:
    """Per-Gaussian screen-space quantities plus backward intermediates.

    Arrays are indexed by surviving Gaussians; ``indices`` maps back into
    the map. ``order`` is the global stable near-to-far ordering both
    renderers composite in.
    """

    indices: np.ndarray  # (K,) int
    means2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 3): upper triangle a, b, c
    conics: np.ndarray  # (K, 3): inverse covariance upper triangle
    depths: np.ndarray  # (K,) camera-frame z
    opacities: np.ndarray  # (K,) activated
    colors: np.ndarray  # (K, 3)
    radii: np.ndarray  # (K,) bounding half-width in pixels
    order: np.ndarray  # (K,) argsort of depths, stable
    p_cam: np.ndarray  # (K, 3)
    jac: np.ndarray  # (K, 2, 3) perspective Jacobian
    uw: np.ndarray  # (K, 2, 3) jac @ world-to-camera rotation
    rot3: np.ndarray  # (K, 3, 3) Gaussian orientation
    scales: np.ndarray  # (K, 3) linear
    cov3d: np.ndarray  # (K, 3, 3) world-frame covariance
    quats_raw: np.ndarray  # (K, 4) unnormalized, as stored


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) alpha-weighted camera z, 0 where nothing rendered
    alpha: np.ndarray  # (H, W) accumulated opacity


def rotation_matrices(quats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize (K, 4) wxyz quaternions and build rotation matrices.

    Returns (R (K, 3, 3), unit quats (K, 4), input norms (K,)).
    """
    quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    norms = np.linalg.norm(quats, axis=1)
    unit = quats / np.maximum(norms, 1e-12)[:, None]
    w, x, y, z = unit[:, 0], unit[:, 1], unit[:, 2], unit[:, 3]
    rot = np.empty((quats.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot, unit, norms


def project_gaussians(
    gmap: GaussianMap, pose: Pose, intr: Intrinsics, cfg: RenderConfig
) -> ProjectedGaussians:
    """Cull, project means, and linearize covariances into pixel space.

    The world covariance R diag(s^2) R^T is pushed through the local affine
    approximation of the projection and floored with an isotropic dilation
    so every splat covers at least a pixel footprint.
    """
    p_cam_all = gmap.positions @ pose.rotation.T + pose.translation
    opac_all = gmap.opacities()
    keep = (p_cam_all[:, 2] > cfg.near_plane) & (opac_all >= cfg.alpha_min)
    indices = np.flatnonzero(keep)
    p_cam = p_cam_all[indices]
    k = indices.shape[0]

    z = p_cam[:, 2]
    means2d = np.empty((k, 2))
    means2d[:, 0] = intr.fx * p_cam[:, 0] / z + intr.cx
    means2d[:, 1] = intr.fy * p_cam[:, 1] / z + intr.cy

    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = intr.fx / z
    jac[:, 0, 2] = -intr.fx * p_cam[:, 0] / (z * z)
    jac[:, 1, 1] = intr.fy / z
    jac[:, 1, 2] = -intr.fy * p_cam[:, 1] / (z * z)

    rot3, _, _ = rotation_matrices(gmap.rotations[indices])
    scales = np.exp(gmap.log_scales[indices])
    m3 = rot3 * scales[:, None, :]
    cov3d = m3 @ np.transpose(m3, (0, 2, 1))

    uw = jac @ pose.rotation  # (K, 2, 3)
    cov2d_full = uw @ cov3d @ np.transpose(uw, (0, 2, 1))
    a = cov2d_full[:, 0, 0] + cfg.dilation
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + cfg.dilation
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    cov2d = np.stack([a, b, c], axis=1)

    opac = opac_all[indices]
    lam_max = 0.5 * (a + c) + np.sqrt(np.square(0.5 * (a - c)) + b * b)
    chi2 = 2.0 * np.log(np.maximum(opac / cfg.alpha_min, 1.0))
    radii = np.sqrt(lam_max * chi2) + 1.0

    return ProjectedGaussians(
        indices=indices,
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=z.copy(),
        opacities=opac,
        colors=gmap.colors[indices].copy(),
        radii=radii,
        order=np.argsort(z, kind="stable"),
        p_cam=p_cam,
        jac=jac,
        uw=uw,
        rot3=rot3,
        scales=scales,
        cov3d=cov3d,
        quats_raw=gmap.rotations[indices].copy(),
    )


def _alpha_terms(
    conics: np.ndarray,  # (K, 3)
    opacities: np.ndarray,  # (K,)
    dx: np.ndarray,  # (K, P)
    dy: np.ndarray,  # (K, P)
    cfg: RenderConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared alpha model. Returns (mahalanobis/2, raw alpha, clipped alpha).

    Raw alpha below alpha_min is zeroed outright; above alpha_max it is
    clamped. Both renderers call this with identical per-pair operands, so
    the values agree bit for bit.
    """
    a0 = conics[:, 0][:, None]
    a1 = conics[:, 1][:, None]
    a2 = conics[:, 2][:, None]
    m = 0.5 * (a0 * dx * dx + 2.0 * a1 * dx * dy + a2 * dy * dy)
    alpha_raw = opacities[:, None] * np.exp(-m)
    alpha = np.where(alpha_raw < cfg.alpha_min, 0.0, np.minimum(alpha_raw, cfg.alpha_max))
    return m, alpha_raw, alpha


def _tile_bins(
    proj: ProjectedGaussians, width: int, height: int, cfg: RenderConfig
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Bin depth-ranked Gaussians into tiles they may touch.

    Returns (flat per-tile concatenated projected-array row ids, tile start
    offsets, tiles_x, tiles_y). Within each tile the ids keep the global
    depth order.
    """
    ts = cfg.tile_size
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    ranked = proj.order
    if ranked.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64), tiles_x, tiles_y

    x = proj.means2d[ranked, 0]
    y = proj.means2d[ranked, 1]
    r = proj.radii[ranked]
    tx0 = np.clip(np.floor((x - r) / ts), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((x + r) / ts), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((y - r) / ts), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((y + r) / ts), 0, tiles_y - 1).astype(np.int64)
    offscreen = (x + r < 0) | (x - r > width - 1) | (y + r < 0) | (y - r > height - 1)
    nx = np.where(offscreen, 0, tx1 - tx0 + 1)
    ny = np.where(offscreen, 0, ty1 - ty0 + 1)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64), tiles_x, tiles_y

    owner = np.repeat(np.arange(ranked.size), counts)  # rank of the owning Gaussian
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    w_span = np.repeat(np.maximum(nx, 1), counts)
    dx_t = local % w_span
    dy_t = local // w_span
    tile_id = (np.repeat(ty0, counts) + dy_t) * tiles_x + (np.repeat(tx0, counts) + dx_t)

    order = np.argsort(tile_id * np.int64(ranked.size) + owner, kind="stable")
    tile_sorted = tile_id[order]
    rows = ranked[owner[order]]
    offsets = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    return rows, offsets, tiles_x, tiles_y


def render_tiled(
    proj: ProjectedGaussians, width: int, height: int, cfg: RenderConfig
) -> RenderOutput:
    """Composite front to back per tile, stopping at saturated transmittance."""
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    acc = np.zeros((height, width))
    rows, offsets, tiles_x, tiles_y = _tile_bins(proj, width, height, cfg)
    if rows.size == 0:
        return RenderOutput(color, depth, acc)

    chunk = 64
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    # color, depth, and accumulated alpha come out of one weighted product
    payload = np.concatenate(
        [proj.colors, proj.depths[:, None], np.ones((proj.depths.size, 1))], axis=1
    )
    for ty in range(tiles_y):
        y0 = ty * cfg.tile_size
        y1 = min(y0 + cfg.tile_size, height)
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            ids = rows[offsets[t] : offsets[t + 1]]
            if ids.size == 0:
                continue
            x0 = tx * cfg.tile_size
            x1 = min(x0 + cfg.tile_size, width)
            px = np.tile(xs[x0:x1], y1 - y0)
            py = np.repeat(ys[y0:y1], x1 - x0)
            n_pix = px.size
            mx = proj.means2d[ids, 0]
            my = proj.means2d[ids, 1]
            cons = proj.conics[ids]
            ops = proj.opacities[ids]
            pay = payload[ids]
            tile_out = np.zeros((n_pix, 5))
            trans = np.ones(n_pix)
            for s in range(0, ids.size, chunk):
                e = s + chunk
                dx = px[None, :] - mx[s:e, None]
                dy = py[None, :] - my[s:e, None]
                _, _, alpha = _alpha_terms(cons[s:e], ops[s:e], dx, dy, cfg)
                t_before = trans * np.concatenate(
                    [np.ones((1, n_pix)), np.cumprod(1.0 - alpha[:-1], axis=0)]
                )
                w = alpha * t_before * (t_before >= cfg.transmittance_min)
                tile_out += w.T @ pay[s:e]
                trans = t_before[-1] * (1.0 - alpha[-1])
                if trans.max() < cfg.transmittance_min:
                    break
            shape = (y1 - y0, x1 - x0)
            color[y0:y1, x0:x1] = tile_out[:, :3].reshape(shape + (3,))
            depth[y0:y1, x0:x1] = tile_out[:, 3].reshape(shape)
            acc[y0:y1, x0:x1] = tile_out[:, 4].reshape(shape)
    return RenderOutput(color, depth, acc)


def render_brute_force(
    proj: ProjectedGaussians, width: int, height: int, cfg: RenderConfig
) -> RenderOutput:
    """Reference compositor: every Gaussian against every pixel, no cutoff.

    Row-chunked so the dense (K, pixels) intermediates stay bounded.
    """
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    acc = np.zeros((height, width))
    k = proj.order.size
    if k == 0:
        return RenderOutput(color, depth, acc)
    ranked = proj.order
    conics = proj.conics[ranked]
    opac = proj.opacities[ranked]
    cols = proj.colors[ranked]
    zs = proj.depths[ranked]
    mx = proj.means2d[ranked, 0][:, None]
    my = proj.means2d[ranked, 1][:, None]

    rows_per_chunk = max(1, 4_000_000 // max(1, k * width))
    xs = np.arange(width, dtype=np.float64)
    for y0 in range(0, height, rows_per_chunk):
        y1 = min(y0 + rows_per_chunk, height)
        py, px = np.meshgrid(np.arange(y0, y1, dtype=np.float64), xs, indexing="ij")
        px = px.ravel()
        py = py.ravel()
        dx = px[None, :] - mx
        dy = py[None, :] - my
        _, _, alpha = _alpha_terms(conics, opac, dx, dy, cfg)
        t_before = np.concatenate(
            [np.ones((1, px.size)), np.cumprod(1.0 - alpha[:-1], axis=0)]
        )
        w = alpha * t_before
        shape = (y1 - y0, width)
        color[y0:y1] = (w.T @ cols).reshape(shape + (3,))
        depth[y0:y1] = (w.T @ zs).reshape(shape)
        acc[y0:y1] = w.sum(axis=0).reshape(shape)
    return RenderOutput(color, depth, acc)


def render_map(
    gmap: GaussianMap, pose: Pose, intr: Intrinsics, cfg: RenderConfig
) -> RenderOutput:
    proj = project_gaussians(gmap, pose, intr, cfg)
    return render_tiled(proj, intr.width, intr.height, cfg)


def render_depth_for_background(
    gmap: GaussianMap, pose: Pose, intr: Intrinsics, cfg: RenderConfig
) -> np.ndarray:
    """Rendered depth with weakly covered pixels zeroed.

    The alpha-weighted depth is used as is; pixels whose accumulated
    opacity falls below the threshold read as missing (0) so downstream
    consumers treat them like sensor dropouts.
    """
    out = render_map(gmap, pose, intr, cfg)
    return np.where(out.alpha >= cfg.background_opacity_threshold, out.depth, 0.0)
