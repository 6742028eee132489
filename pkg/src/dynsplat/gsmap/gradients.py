"""Masked photometric/depth loss and its analytic gradients.

The loss compares a rendered view against a keyframe over the static image
region only, an L1 in color plus an L1 in depth where the sensor reported
depth. The backward pass replays the tiled forward per tile and chains
through compositing weights, the alpha clip and clamp, the pixel-space
covariance, and the world-space parameterization (position, opacity logit,
log scales, quaternion, color).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Intrinsics, Pose
from .model import GaussianMap
from .render import ProjectedGaussians, RenderConfig, _alpha_terms, _tile_bins, project_gaussians


class NoStaticPixels(RuntimeError):
    """Static mask left nothing to supervise on; the frame cannot train the map."""


@dataclass
class ParamGradients:
    """Loss gradients, full map length; culled Gaussians hold zeros."""

    positions: np.ndarray
    opacity_logits: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    color_term: float
    depth_term: float
    n_static: int
    n_depth: int


def masked_l1_loss(
    color: np.ndarray,
    depth: np.ndarray,
    target_color: np.ndarray,
    target_depth: np.ndarray,
    static_mask: np.ndarray,
    lambda_depth: float = 0.7,
) -> LossBreakdown:
    """Static-region L1 on color and on valid sensor depth.

    Color averages over 3 * n_static values, depth over pixels that are both
    static and carry positive target depth. Raises NoStaticPixels when the
    mask is empty.
    """
    static = np.asarray(static_mask, dtype=bool)
    n_static = int(np.count_nonzero(static))
    if n_static == 0:
        raise NoStaticPixels("static mask covers zero pixels")
    depth_mask = static & (target_depth > 0)
    n_depth = int(np.count_nonzero(depth_mask))

    color_term = float(
        np.abs(color - target_color)[static].sum() / (3.0 * n_static)
    )
    if n_depth:
        depth_term = float(np.abs(depth - target_depth)[depth_mask].sum() / n_depth)
    else:
        depth_term = 0.0
    total = (1.0 - lambda_depth) * color_term + lambda_depth * depth_term
    return LossBreakdown(total, color_term, depth_term, n_static, n_depth)


def _quat_grad(d_rot: np.ndarray, quats_raw: np.ndarray) -> np.ndarray:
    """Chain (K, 3, 3) rotation-matrix gradients to raw quaternion gradients."""
    norms = np.linalg.norm(quats_raw, axis=1)
    unit = quats_raw / np.maximum(norms, 1e-12)[:, None]
    w, x, y, z = unit[:, 0], unit[:, 1], unit[:, 2], unit[:, 3]
    g = d_rot  # shorthand; g[:, i, j] is dL/dR_ij

    gw = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    gx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2.0 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2.0 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    g_unit = np.stack([gw, gx, gy, gz], axis=1)
    # normalization projects out the radial component and rescales
    radial = np.sum(g_unit * unit, axis=1, keepdims=True)
    return (g_unit - radial * unit) / np.maximum(norms, 1e-12)[:, None]


def loss_and_gradients(
    gmap: GaussianMap,
    pose: Pose,
    intr: Intrinsics,
    target_color: np.ndarray,
    target_depth: np.ndarray,
    static_mask: np.ndarray,
    cfg: RenderConfig,
    lambda_depth: float = 0.7,
) -> tuple[LossBreakdown, ParamGradients]:
    """Fused tiled forward render and analytic backward pass.

    Raises NoStaticPixels before touching the map when the mask is empty.
    """
    static = np.asarray(static_mask, dtype=bool)
    n_static = int(np.count_nonzero(static))
    if n_static == 0:
        raise NoStaticPixels("static mask covers zero pixels")
    depth_mask = static & (target_depth > 0)
    n_depth = int(np.count_nonzero(depth_mask))

    height, width = static.shape
    proj = project_gaussians(gmap, pose, intr, cfg)
    k = proj.indices.size
    grads = ParamGradients(
        positions=np.zeros_like(gmap.positions),
        opacity_logits=np.zeros_like(gmap.opacity_logits),
        log_scales=np.zeros_like(gmap.log_scales),
        rotations=np.zeros_like(gmap.rotations),
        colors=np.zeros_like(gmap.colors),
    )
    if k == 0:
        loss = masked_l1_loss(
            np.zeros((height, width, 3)),
            np.zeros((height, width)),
            target_color,
            target_depth,
            static,
            lambda_depth,
        )
        return loss, grads

    # per-projected-Gaussian accumulators, filled tile by tile
    g_op = np.zeros(k)
    g_mean = np.zeros((k, 2))
    g_cov_b = np.zeros((k, 3))  # sum of dL/dm * [dx^2, dx*dy, dy^2] / 2
    g_col = np.zeros((k, 3))
    g_depth = np.zeros(k)

    color_abs = 0.0
    depth_abs = 0.0
    c_scale = (1.0 - lambda_depth) / (3.0 * n_static)
    d_scale = lambda_depth / n_depth if n_depth else 0.0

    rows, offsets, tiles_x, tiles_y = _tile_bins(proj, width, height, cfg)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    chunk = 32
    for ty in range(tiles_y):
        y0 = ty * cfg.tile_size
        y1 = min(y0 + cfg.tile_size, height)
        for tx in range(tiles_x):
            x0 = tx * cfg.tile_size
            x1 = min(x0 + cfg.tile_size, width)
            t = ty * tiles_x + tx
            ids = rows[offsets[t] : offsets[t + 1]]

            t_static = static[y0:y1, x0:x1].ravel()
            t_dmask = depth_mask[y0:y1, x0:x1].ravel()
            tc_target = target_color[y0:y1, x0:x1].reshape(-1, 3)
            td_target = target_depth[y0:y1, x0:x1].ravel()

            if ids.size == 0:
                color_abs += np.abs(tc_target[t_static]).sum()
                depth_abs += np.abs(td_target[t_dmask]).sum()
                continue

            px = np.tile(xs[x0:x1], y1 - y0)
            py = np.repeat(ys[y0:y1], x1 - x0)
            n_pix = px.size
            # forward in depth-order chunks, stopping once every pixel has
            # saturated; rows past that are dead for render and training alike
            trans = np.ones(n_pix)
            parts = []
            n_rows = 0
            for start in range(0, ids.size, chunk):
                sl = ids[start : start + chunk]
                dx_c = px[None, :] - proj.means2d[sl, 0][:, None]
                dy_c = py[None, :] - proj.means2d[sl, 1][:, None]
                m_c, araw_c, a_c = _alpha_terms(
                    proj.conics[sl], proj.opacities[sl], dx_c, dy_c, cfg
                )
                tb_c = trans[None, :] * np.concatenate(
                    [np.ones((1, n_pix)), np.cumprod(1.0 - a_c[:-1], axis=0)]
                )
                parts.append((dx_c, dy_c, m_c, araw_c, a_c, tb_c))
                n_rows += sl.size
                trans = tb_c[-1] * (1.0 - a_c[-1])
                if trans.max() < cfg.transmittance_min:
                    break
            if len(parts) == 1:
                dx, dy, m, alpha_raw, alpha, t_before = parts[0]
            else:
                dx, dy, m, alpha_raw, alpha, t_before = (
                    np.concatenate([p[i] for p in parts]) for i in range(6)
                )
            ids = ids[:n_rows]
            # trim the saturated tail within the collected prefix
            row_max = t_before.max(axis=1)
            dead = row_max < cfg.transmittance_min
            if dead.any():
                cut = int(np.argmax(dead))  # >= 1, the first row is always live
                ids = ids[:cut]
                dx, dy, m = dx[:cut], dy[:cut], m[:cut]
                alpha_raw, alpha, t_before = alpha_raw[:cut], alpha[:cut], t_before[:cut]
            live = t_before >= cfg.transmittance_min
            w = alpha * t_before * live

            cols = proj.colors[ids]
            zs = proj.depths[ids]
            tile_color = w.T @ cols
            tile_depth = w.T @ zs

            diff_c = tile_color - tc_target
            diff_d = tile_depth - td_target
            color_abs += np.abs(diff_c[t_static]).sum()
            depth_abs += np.abs(diff_d[t_dmask]).sum()

            g_pix_c = c_scale * np.sign(diff_c) * t_static[:, None]  # (P, 3)
            g_pix_d = d_scale * np.sign(diff_d) * t_dmask  # (P,)

            dldw = cols @ g_pix_c.T + zs[:, None] * g_pix_d[None, :]  # (K_t, P)
            q = dldw * w
            rev = np.cumsum(q[::-1], axis=0)[::-1]
            suffix = rev - q  # sum over strictly later Gaussians
            dlda = dldw * t_before * live - suffix / (1.0 - alpha)

            passthrough = (alpha_raw >= cfg.alpha_min) & (alpha_raw <= cfg.alpha_max)
            dlda_raw = dlda * passthrough
            dldm = -dlda_raw * alpha_raw

            g_op[ids] += (dlda_raw * np.exp(-m)).sum(axis=1)
            a0 = proj.conics[ids, 0][:, None]
            a1 = proj.conics[ids, 1][:, None]
            a2 = proj.conics[ids, 2][:, None]
            g_mean[ids, 0] -= (dldm * (a0 * dx + a1 * dy)).sum(axis=1)
            g_mean[ids, 1] -= (dldm * (a1 * dx + a2 * dy)).sum(axis=1)
            g_cov_b[ids, 0] += 0.5 * (dldm * dx * dx).sum(axis=1)
            g_cov_b[ids, 1] += 0.5 * (dldm * dx * dy).sum(axis=1)
            g_cov_b[ids, 2] += 0.5 * (dldm * dy * dy).sum(axis=1)
            g_col[ids] += w @ g_pix_c
            g_depth[ids] += w @ g_pix_d

    color_term = color_abs / (3.0 * n_static)
    depth_term = depth_abs / n_depth if n_depth else 0.0
    loss = LossBreakdown(
        (1.0 - lambda_depth) * color_term + lambda_depth * depth_term,
        color_term,
        depth_term,
        n_static,
        n_depth,
    )

    # pixel-space covariance gradient: m = dlt' A dlt with A = inv(cov2d),
    # so dL/dcov2d = -A (sum dL/dm * dlt dlt'/2) A
    conic_m = np.empty((k, 2, 2))
    conic_m[:, 0, 0] = proj.conics[:, 0]
    conic_m[:, 0, 1] = conic_m[:, 1, 0] = proj.conics[:, 1]
    conic_m[:, 1, 1] = proj.conics[:, 2]
    b_m = np.empty((k, 2, 2))
    b_m[:, 0, 0] = g_cov_b[:, 0]
    b_m[:, 0, 1] = b_m[:, 1, 0] = g_cov_b[:, 1]
    b_m[:, 1, 1] = g_cov_b[:, 2]
    g_cov2d = -conic_m @ b_m @ conic_m  # (K, 2, 2), symmetric

    g_uw = 2.0 * g_cov2d @ proj.uw @ proj.cov3d  # (K, 2, 3)
    g_cov3d = np.transpose(proj.uw, (0, 2, 1)) @ g_cov2d @ proj.uw  # (K, 3, 3)
    m3 = proj.rot3 * proj.scales[:, None, :]
    g_m3 = 2.0 * g_cov3d @ m3
    g_logs = np.einsum("kij,kij->kj", g_m3, proj.rot3) * proj.scales
    g_rot3 = g_m3 * proj.scales[:, None, :]
    g_quat = _quat_grad(g_rot3, proj.quats_raw)

    g_jac = g_uw @ pose.rotation.T  # (K, 2, 3)
    g_pcam = np.einsum("kij,ki->kj", proj.jac, g_mean)  # mean path, J^T g
    g_pcam[:, 2] += g_depth
    fx, fy = intr.fx, intr.fy
    xc, yc, zc = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    inv_z2 = 1.0 / (zc * zc)
    g_pcam[:, 0] += g_jac[:, 0, 2] * (-fx * inv_z2)
    g_pcam[:, 1] += g_jac[:, 1, 2] * (-fy * inv_z2)
    g_pcam[:, 2] += (
        g_jac[:, 0, 0] * (-fx * inv_z2)
        + g_jac[:, 1, 1] * (-fy * inv_z2)
        + g_jac[:, 0, 2] * (2.0 * fx * xc * inv_z2 / zc)
        + g_jac[:, 1, 2] * (2.0 * fy * yc * inv_z2 / zc)
    )
    g_pos = g_pcam @ pose.rotation  # world frame

    opac = proj.opacities
    idx = proj.indices
    grads.positions[idx] = g_pos
    grads.opacity_logits[idx] = g_op * opac * (1.0 - opac)
    grads.log_scales[idx] = g_logs
    grads.rotations[idx] = g_quat
    grads.colors[idx] = g_col
    return loss, grads
