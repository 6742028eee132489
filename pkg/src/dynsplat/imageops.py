"""Small image utilities shared by the flow and feature modules.

Coordinate convention for resampling: output pixel j of a resize by scale s
samples the input at coordinate j * s. No half-pixel center offset, so a
pyramid-level coordinate p maps back to level 0 as p * s**level exactly.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_grayscale(color: np.ndarray) -> np.ndarray:
    """(H, W, 3) color in [0, 1] to (H, W) luminance in [0, 1]."""
    return np.asarray(color, dtype=np.float64) @ GRAY_WEIGHTS


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(image, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma=sigma, mode="nearest")


def resize_by_scale(image: np.ndarray, scale: float) -> np.ndarray:
    """Shrink (scale > 1) or grow (scale < 1) by sampling at j * scale."""
    h, w = image.shape
    out_h = max(1, int(np.floor(h / scale)))
    out_w = max(1, int(np.floor(w / scale)))
    ys = np.arange(out_h) * scale
    xs = np.arange(out_w) * scale
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(
        np.asarray(image, dtype=np.float64), [grid_y, grid_x], order=1, mode="nearest"
    )


def resize_to(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (H, W) with the same j * scale convention."""
    h, w = image.shape
    out_h, out_w = out_shape
    ys = np.arange(out_h) * (h / out_h)
    xs = np.arange(out_w) * (w / out_w)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(
        np.asarray(image, dtype=np.float64), [grid_y, grid_x], order=1, mode="nearest"
    )


def min_pool_mask(mask: np.ndarray, scale: float, out_shape: tuple[int, int]) -> np.ndarray:
    """Downsample a binary mask conservatively.

    An output pixel is 1 only if every input pixel of its span
    [floor(j*s), floor((j+1)*s)) is 1. Requires scale > 1.
    """
    mask = np.asarray(mask)
    out_h, out_w = out_shape
    row_starts = np.floor(np.arange(out_h) * scale).astype(np.intp)
    col_starts = np.floor(np.arange(out_w) * scale).astype(np.intp)
    row_starts = np.minimum(row_starts, mask.shape[0] - 1)
    col_starts = np.minimum(col_starts, mask.shape[1] - 1)
    pooled = np.minimum.reduceat(mask, row_starts, axis=0)
    pooled = np.minimum.reduceat(pooled, col_starts, axis=1)
    return pooled.astype(mask.dtype)


def warp_image(image: np.ndarray, du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Sample image at (x + du, y + dv) per pixel, bilinear, edge-clamped."""
    h, w = image.shape
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return ndimage.map_coordinates(image, [grid_y + dv, grid_x + du], order=1, mode="nearest")
