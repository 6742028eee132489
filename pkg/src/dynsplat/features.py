"""Sparse features for tracking in partially masked images.

Detection relaxes its similarity threshold as more of the image is masked
dynamic, which keeps the number of usable points roughly stable: the
threshold sigma_dy = sigma_0 * (1 - k * static_fraction) grows when the
static fraction shrinks.

A pixel qualifies when strictly more than n_f of the 16 samples on a
radius-3 Bresenham circle are within sigma_dy of the center intensity
(all-similar neighborhoods, the default comparator) and the pixel is static
in the mask at its pyramid level. An inverted comparator (samples differing
by at least sigma_dy, the classic corner test) is available for comparison
runs. Qualifying pixels pass an 8-neighborhood non-maximum suppression on
the sample count and a global budget cap.

Descriptors are 256 binary intensity comparisons on a fixed seeded pattern
inside a 31x31 patch at the feature's own pyramid level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageops import gaussian_blur, min_pool_mask, resize_by_scale, to_grayscale

# radius-3 Bresenham circle, 16 samples, clockwise from 12 o'clock; (dx, dy)
CIRCLE_OFFSETS = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)

_CIRCLE_MARGIN = 3
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


@dataclass
class FeatureConfig:
    sigma_0: float = 0.3  # base threshold, grayscale units on [0, 1] images
    k: float = 0.9  # mask-compensation gain
    n_f: int = 12  # strict sample-count threshold
    n_levels: int = 4
    pyramid_scale: float = 1.25
    blur_sigma: float = 1.0
    target_count: int = 1000  # budget cap, tuned for 640x480
    cell_size: int = 32  # bucket edge for the spatially distributed cap, px
    inverted_comparator: bool = False
    patch_size: int = 31  # descriptor patch edge
    descriptor_bits: int = 256
    match_max_distance: int = 64  # Hamming
    match_ratio: float = 0.8  # best < ratio * second best


@dataclass(frozen=True)
class FeaturePoint:
    x: float  # level-0 column coordinate
    y: float  # level-0 row coordinate
    level: int
    score: int  # qualifying sample count at detection
    level_x: int = 0  # integer coordinates at the feature's own level
    level_y: int = 0


@dataclass
class MatchSet:
    pairs: np.ndarray  # (M, 2) indices into (query, train)
    distances: np.ndarray  # (M,) Hamming distances

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class Pyramid:
    levels: list[np.ndarray]  # blurred grayscale per level
    masks: list[np.ndarray]  # min-pooled static masks per level
    scale: float

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_scale(self, level: int) -> float:
        return self.scale**level


def adaptive_threshold(static_mask: np.ndarray, cfg: FeatureConfig) -> float:
    """sigma_dy = sigma_0 * (1 - k * static_fraction)."""
    mask = np.asarray(static_mask)
    static_fraction = float(np.count_nonzero(mask)) / mask.size
    return cfg.sigma_0 * (1.0 - cfg.k * static_fraction)


def build_pyramid(gray: np.ndarray, static_mask: np.ndarray, cfg: FeatureConfig) -> Pyramid:
    gray = np.asarray(gray, dtype=np.float64)
    levels = [gaussian_blur(gray, cfg.blur_sigma)]
    for _ in range(cfg.n_levels - 1):
        levels.append(gaussian_blur(resize_by_scale(levels[-1], cfg.pyramid_scale), cfg.blur_sigma))
    masks = [np.asarray(static_mask, dtype=np.uint8)]
    for lvl in range(1, cfg.n_levels):
        masks.append(
            min_pool_mask(masks[0], cfg.pyramid_scale**lvl, levels[lvl].shape)
        )
    return Pyramid(levels=levels, masks=masks, scale=cfg.pyramid_scale)


def _qualifying_counts(
    image: np.ndarray, sigma_dy: float, inverted: bool, margin: int = _CIRCLE_MARGIN
) -> np.ndarray:
    """Sample counts for interior pixels; a border band of `margin` scores 0.

    The margin is at least the circle radius; the detector widens it to the
    descriptor patch radius so every feature can be described in bounds.
    """
    h, w = image.shape
    margin = max(margin, _CIRCLE_MARGIN)
    counts = np.zeros((h, w), dtype=np.int32)
    if h <= 2 * margin or w <= 2 * margin:
        return counts
    m = _CIRCLE_MARGIN
    center = image[m : h - m, m : w - m]
    interior = counts[m : h - m, m : w - m]
    for dx, dy in CIRCLE_OFFSETS:
        sample = image[m + dy : h - m + dy, m + dx : w - m + dx]
        diff = np.abs(center - sample)
        interior += (diff >= sigma_dy) if inverted else (diff < sigma_dy)
    if margin > m:
        counts[:margin, :] = 0
        counts[-margin:, :] = 0
        counts[:, :margin] = 0
        counts[:, -margin:] = 0
    return counts


def detect_features(pyramid: Pyramid, sigma_dy: float, cfg: FeatureConfig) -> list[FeaturePoint]:
    """Relaxed detection over all pyramid levels, suppressed and capped.

    The cap is spatially bucketed: candidates fall into a coarse cell grid
    (cell_size px at full resolution) and the budget is spent round-robin
    over the cells, best candidate of each cell first. Repetitive texture
    with thousands of equal-score corners therefore cannot monopolize the
    budget and starve whole image regions, which would leave pose
    estimation with degenerate, near-coplanar support. Within a cell, ties
    break toward lower level, then row, then column; cells are visited in
    row-major order, so the result is deterministic.
    """
    cells: dict[tuple[int, int], list[tuple[int, int, int, int]]] = {}
    total = 0
    margin = cfg.patch_size // 2
    for level, (image, mask) in enumerate(zip(pyramid.levels, pyramid.masks)):
        counts = _qualifying_counts(image, sigma_dy, cfg.inverted_comparator, margin)
        qualify = (counts > cfg.n_f) & (mask > 0)
        score_map = np.where(qualify, counts, 0)
        local_max = ndimage.maximum_filter(score_map, size=3, mode="constant", cval=0)
        keep = qualify & (score_map == local_max)
        ys, xs = np.nonzero(keep)
        scores = counts[ys, xs]
        s = pyramid.level_scale(level)
        cell_ys = (ys * s / cfg.cell_size).astype(np.int64)
        cell_xs = (xs * s / cfg.cell_size).astype(np.int64)
        for cy, cx, y, x, score in zip(
            cell_ys.tolist(), cell_xs.tolist(), ys.tolist(), xs.tolist(), scores.tolist()
        ):
            cells.setdefault((cy, cx), []).append((-score, level, y, x))
            total += 1
    queues = [sorted(cells[key]) for key in sorted(cells)]
    picked: list[tuple[int, int, int, int]] = []
    budget = min(cfg.target_count, total)
    rank = 0
    while len(picked) < budget:
        progressed = False
        for queue in queues:
            if rank < len(queue):
                picked.append(queue[rank])
                progressed = True
                if len(picked) == budget:
                    break
        if not progressed:
            break
        rank += 1
    out: list[FeaturePoint] = []
    for neg_score, level, y, x in picked:
        s = pyramid.level_scale(level)
        out.append(
            FeaturePoint(x=x * s, y=y * s, level=level, score=-neg_score, level_x=x, level_y=y)
        )
    return out


def detect(
    gray: np.ndarray, static_mask: np.ndarray, sigma_dy: float, cfg: FeatureConfig
) -> list[FeaturePoint]:
    return detect_features(build_pyramid(gray, static_mask, cfg), sigma_dy, cfg)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


def make_descriptor_pattern(rng: np.random.Generator, cfg: FeatureConfig | None = None) -> np.ndarray:
    """(bits, 4) array of (dy1, dx1, dy2, dx2) comparison offsets.

    Offsets are Gaussian around the patch center (sigma = patch/5), clipped
    to the patch, the usual recipe for binary intensity tests.
    """
    cfg = cfg or FeatureConfig()
    half = cfg.patch_size // 2
    sigma = cfg.patch_size / 5.0
    offsets = np.clip(
        np.round(rng.normal(scale=sigma, size=(cfg.descriptor_bits, 4))), -half, half
    ).astype(np.int64)
    return offsets


DEFAULT_PATTERN = make_descriptor_pattern(np.random.default_rng(0x9E3779B9))


def describe(
    pyramid: Pyramid, features: list[FeaturePoint], pattern: np.ndarray | None = None
) -> np.ndarray:
    """Packed binary descriptors, one row of 32 bytes per feature.

    Bit b is 1 when intensity at offset (dy1, dx1) is less than at
    (dy2, dx2), sampled at the feature's own pyramid level with
    edge-clamped coordinates.
    """
    if pattern is None:
        pattern = DEFAULT_PATTERN
    n_bits = pattern.shape[0]
    out_bits = np.zeros((len(features), n_bits), dtype=bool)
    by_level: dict[int, list[int]] = {}
    for idx, feat in enumerate(features):
        by_level.setdefault(feat.level, []).append(idx)
    for level, indices in by_level.items():
        image = pyramid.levels[level]
        h, w = image.shape
        ys = np.array([features[i].level_y for i in indices])
        xs = np.array([features[i].level_x for i in indices])
        y1 = np.clip(ys[:, None] + pattern[None, :, 0], 0, h - 1)
        x1 = np.clip(xs[:, None] + pattern[None, :, 1], 0, w - 1)
        y2 = np.clip(ys[:, None] + pattern[None, :, 2], 0, h - 1)
        x2 = np.clip(xs[:, None] + pattern[None, :, 3], 0, w - 1)
        out_bits[indices] = image[y1, x1] < image[y2, x2]
    return np.packbits(out_bits, axis=1)


def hamming_matrix(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """(N_a, N_b) pairwise Hamming distances between packed descriptors."""
    if desc_a.size == 0 or desc_b.size == 0:
        return np.zeros((desc_a.shape[0], desc_b.shape[0]), dtype=np.int32)
    xor = desc_a[:, None, :] ^ desc_b[None, :, :]
    return _POPCOUNT[xor].sum(axis=-1).astype(np.int32)


def match(desc_a: np.ndarray, desc_b: np.ndarray, cfg: FeatureConfig) -> MatchSet:
    """Mutual nearest neighbors with a ratio test and a distance gate.

    A pair (i, j) survives when j is i's nearest neighbor and vice versa,
    the distance is at most match_max_distance, and the best distance beats
    match_ratio times the second best on the query side (a lone candidate
    has no second best and passes the ratio trivially).
    """
    empty = MatchSet(pairs=np.zeros((0, 2), dtype=np.int64), distances=np.zeros(0, dtype=np.int32))
    if desc_a.shape[0] == 0 or desc_b.shape[0] == 0:
        return empty
    dist = hamming_matrix(desc_a, desc_b)
    best_j = np.argmin(dist, axis=1)
    best_d = dist[np.arange(dist.shape[0]), best_j]
    if dist.shape[1] >= 2:
        part = np.partition(dist, 1, axis=1)
        second_d = part[:, 1]
    else:
        second_d = np.full(dist.shape[0], np.iinfo(np.int32).max)
    best_i = np.argmin(dist, axis=0)
    mutual = best_i[best_j] == np.arange(dist.shape[0])
    ratio_ok = best_d < cfg.match_ratio * second_d
    keep = mutual & ratio_ok & (best_d <= cfg.match_max_distance)
    idx_a = np.nonzero(keep)[0]
    pairs = np.column_stack([idx_a, best_j[idx_a]])
    return MatchSet(pairs=pairs, distances=best_d[idx_a])


def grayscale(color: np.ndarray) -> np.ndarray:
    """Convenience re-export of the shared luminance conversion."""
    return to_grayscale(color)
