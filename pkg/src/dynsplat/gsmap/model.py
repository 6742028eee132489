"""Gaussian map storage, feature-anchored insertion, pruning, serialization.

Parameters are kept in unconstrained form: opacity as a logit, scale as
log-meters, rotation as a quaternion renormalized by consumers. The struct
of arrays keeps optimizer moment buffers length-matched to the Gaussians.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import Intrinsics, Pose, unproject_points

LOG_SCALE_MIN = float(np.log(1e-6))
LOG_SCALE_MAX = float(np.log(10.0))

_MAGIC = b"GMAP"
_VERSION = 1
_RECORD = struct.Struct("<14f")  # x y z, opacity, sx sy sz, qw qx qy qz, r g b


class MapFormatError(RuntimeError):
    """Serialized map file is malformed."""


@dataclass
class MapConfig:
    base_radius: float = 0.03  # isotropic radius of inserted Gaussians, meters
    n_densify: int = 4  # extra Gaussians sampled around each accepted seed
    densify_radius_factor: float = 2.0  # sampling ball radius / base_radius
    dup_radius_factor: float = 1.0  # dedup radius / base_radius
    insert_opacity: float = 0.5
    densify_opacity: float = 0.25
    prune_opacity: float = 0.05
    prune_interval: int = 100  # optimizer iterations between prune sweeps


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


class GaussianMap:
    """Struct-of-arrays store for the Gaussian parameters.

    Adam moment buffers are owned here so insertion and pruning keep them
    aligned with the parameter arrays; the optimizer only reads and writes
    them through param_names.
    """

    PARAM_NAMES = ("positions", "opacity_logits", "log_scales", "rotations", "colors")

    def __init__(self) -> None:
        self.positions = np.zeros((0, 3))
        self.opacity_logits = np.zeros(0)
        self.log_scales = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))  # wxyz, consumers normalize
        self.colors = np.zeros((0, 3))
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def append(
        self,
        positions: np.ndarray,
        opacity_logits: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray,
        colors: np.ndarray,
    ) -> None:
        n_new = positions.shape[0]
        self.positions = np.concatenate([self.positions, positions])
        self.opacity_logits = np.concatenate([self.opacity_logits, opacity_logits])
        self.log_scales = np.concatenate(
            [self.log_scales, np.clip(log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)]
        )
        self.rotations = np.concatenate([self.rotations, rotations])
        self.colors = np.concatenate([self.colors, colors])
        for name, (m, v) in self.moments.items():
            pad = np.zeros((n_new,) + m.shape[1:])
            self.moments[name] = (np.concatenate([m, pad]), np.concatenate([v, pad.copy()]))

    def keep(self, mask: np.ndarray) -> int:
        """Drop Gaussians where mask is False; returns the number removed."""
        removed = int(np.count_nonzero(~mask))
        if removed == 0:
            return 0
        for name in self.PARAM_NAMES:
            setattr(self, name, getattr(self, name)[mask])
        for name, (m, v) in self.moments.items():
            self.moments[name] = (m[mask], v[mask])
        return removed

    def copy(self) -> "GaussianMap":
        out = GaussianMap()
        for name in self.PARAM_NAMES:
            setattr(out, name, getattr(self, name).copy())
        out.moments = {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()}
        out.step_count = self.step_count
        return out


def insert_from_features(
    gmap: GaussianMap,
    pixels: np.ndarray,  # (M, 2) level-0 feature pixels
    depths: np.ndarray,  # (M,) camera-frame depth, meters
    colors: np.ndarray,  # (M, 3) sampled frame colors in [0, 1]
    pose: Pose,
    intr: Intrinsics,
    rng: np.random.Generator,
    cfg: MapConfig,
) -> int:
    """Anchor new Gaussians at unprojected features; returns seeds accepted.

    A feature whose unprojection lies within the dedup radius of an existing
    Gaussian (or of a seed accepted earlier in this batch) is skipped. Each
    accepted seed also spawns n_densify dimmer Gaussians uniformly sampled
    in the surrounding ball to give the optimizer local texture capacity.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    valid = depths > 0
    if not valid.any():
        return 0
    points = unproject_points(pose, intr, pixels[valid], depths[valid])
    colors = colors[valid]

    r_dup = cfg.dup_radius_factor * cfg.base_radius
    tree = cKDTree(gmap.positions) if len(gmap) else None
    accepted: list[int] = []
    for i in range(points.shape[0]):
        p = points[i]
        if tree is not None and tree.query(p, k=1)[0] < r_dup:
            continue
        if accepted and np.min(np.linalg.norm(points[accepted] - p, axis=1)) < r_dup:
            continue
        accepted.append(i)
    if not accepted:
        return 0

    seeds = points[accepted]
    seed_colors = colors[accepted]
    n_seed = seeds.shape[0]
    n_extra = cfg.n_densify * n_seed

    # uniform sampling in the ball: direction from the sphere, radius by
    # the cube-root law
    directions = rng.normal(size=(n_extra, 3))
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
    radii = cfg.densify_radius_factor * cfg.base_radius * rng.uniform(size=(n_extra, 1)) ** (1 / 3)
    extra = np.repeat(seeds, cfg.n_densify, axis=0) + directions * radii
    extra_colors = np.repeat(seed_colors, cfg.n_densify, axis=0)

    all_pos = np.concatenate([seeds, extra])
    all_colors = np.concatenate([seed_colors, extra_colors])
    all_logits = np.concatenate(
        [
            np.full(n_seed, _logit(cfg.insert_opacity)),
            np.full(n_extra, _logit(cfg.densify_opacity)),
        ]
    )
    all_scales = np.full((n_seed + n_extra, 3), np.log(cfg.base_radius))
    all_rot = np.zeros((n_seed + n_extra, 4))
    all_rot[:, 0] = 1.0
    gmap.append(all_pos, all_logits, all_scales, all_rot, all_colors)
    return n_seed


def prune(gmap: GaussianMap, min_opacity: float) -> int:
    """Remove Gaussians whose activated opacity fell below the floor."""
    return gmap.keep(gmap.opacities() >= min_opacity)


# ---------------------------------------------------------------------------
# Serialization: versioned binary, plus a text form for diffing
# ---------------------------------------------------------------------------


def _export_arrays(gmap: GaussianMap) -> np.ndarray:
    """(N, 14) float rows: position, opacity, scale (m), unit quat, color."""
    n = len(gmap)
    out = np.zeros((n, 14))
    out[:, 0:3] = gmap.positions
    out[:, 3] = gmap.opacities()
    out[:, 4:7] = np.exp(gmap.log_scales)
    norms = np.maximum(np.linalg.norm(gmap.rotations, axis=1, keepdims=True), 1e-12)
    out[:, 7:11] = gmap.rotations / norms
    out[:, 11:14] = gmap.colors
    return out


def _import_arrays(rows: np.ndarray) -> GaussianMap:
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 14)
    gmap = GaussianMap()
    op = np.clip(rows[:, 3], 1e-6, 1.0 - 1e-6)
    scales = np.clip(rows[:, 4:7], 1e-6, 10.0)
    norms = np.maximum(np.linalg.norm(rows[:, 7:11], axis=1, keepdims=True), 1e-12)
    gmap.append(
        rows[:, 0:3].copy(),
        np.log(op / (1.0 - op)),
        np.log(scales),
        rows[:, 7:11] / norms,
        np.clip(rows[:, 11:14], 0.0, 1.0),
    )
    return gmap


def save_map(gmap: GaussianMap, path) -> None:
    rows = _export_arrays(gmap).astype("<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(gmap)))
        f.write(rows.tobytes(order="C"))


def load_map(path) -> GaussianMap:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise MapFormatError("bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise MapFormatError(f"unsupported version {version}")
    expected = 12 + count * _RECORD.size
    if len(blob) != expected:
        raise MapFormatError(f"size mismatch: {len(blob)} bytes, expected {expected}")
    rows = np.frombuffer(blob[12:], dtype="<f4").reshape(count, 14)
    return _import_arrays(rows.astype(np.float64))


def save_map_text(gmap: GaussianMap, path) -> None:
    rows = _export_arrays(gmap)
    header = (
        "gaussian map v1: x y z opacity scale_x scale_y scale_z "
        "quat_w quat_x quat_y quat_z red green blue"
    )
    np.savetxt(path, rows, fmt="%.9g", header=header)


def load_map_text(path) -> GaussianMap:
    try:
        rows = np.loadtxt(path, ndmin=2)
    except ValueError as e:
        raise MapFormatError(f"unparsable text map: {e}") from e
    if rows.size == 0:
        return GaussianMap()
    if rows.shape[1] != 14:
        raise MapFormatError(f"expected 14 columns, got {rows.shape[1]}")
    return _import_arrays(rows)
