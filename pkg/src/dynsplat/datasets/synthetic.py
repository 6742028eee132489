"""Synthetic desk-scale RGB-D scenes rendered by a CPU ray caster.

Scenes are built from axis-aligned textured rectangles and boxes; movers are
boxes whose position is a function of the frame index (translation-only, so
they stay axis-aligned). The caster traces one ray per pixel and returns
exact color, depth, per-pixel static masks, and the exact camera trajectory,
which makes these scenes usable as ground truth in tests.

Depth is the camera-frame z coordinate: ray directions are scaled to unit z
in the camera frame, so the ray parameter at the hit IS the depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..geometry import Intrinsics, Pose
from ..trajectory import Trajectory
from .frames import DatasetError, Frame

_NEAR = 1e-6


class DegenerateScene(DatasetError):
    """Camera center lies inside scene geometry for some frame."""


@dataclass
class Checker:
    """Checkerboard texture: tile edge length in meters and a color palette.

    The tile color is a deterministic hash of the integer tile coordinates,
    which makes neighborhoods distinctive (useful for descriptor matching).
    A quarter-tile brightness hash rides on top so surfaces carry fine
    localized structure; without it, every tile interior is perfectly flat,
    feature positions snap to the pixel lattice and drift coherently as the
    camera moves sub-pixel, which caps pose accuracy around the centimeter
    mark.
    """

    tile: float
    palette: np.ndarray  # (K, 3) in [0, 1]
    detail: float = 0.25  # brightness modulation amplitude, 0 disables

    def colors(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        # Coordinates of miss pixels can be inf/nan; they are masked out by the
        # caller, so any finite stand-in value is fine here.
        u = np.nan_to_num(u, nan=0.0, posinf=0.0, neginf=0.0)
        v = np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0)
        iu = np.floor(u / self.tile).astype(np.int64)
        iv = np.floor(v / self.tile).astype(np.int64)
        idx = (iu * 92837111 + iv * 689287499) % len(self.palette)
        base = self.palette[idx]
        if self.detail:
            ju = np.floor(4.0 * u / self.tile).astype(np.int64)
            jv = np.floor(4.0 * v / self.tile).astype(np.int64)
            h = (ju * 374761393 + jv * 668265263) & 1023
            gain = 1.0 + self.detail * (h / 1023.0 - 0.5)
            base = np.clip(base * gain[..., None], 0.0, 1.0)
        return base


@dataclass
class Rect:
    """Axis-aligned rectangle: normal along `axis`, at coordinate `level`.

    lo/hi bound the two remaining axes in ascending axis order.
    """

    axis: int
    level: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    texture: Checker


@dataclass
class Box:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)
    texture: Checker

    def contains(self, point: np.ndarray) -> bool:
        return bool(np.all(point >= self.lo) and np.all(point <= self.hi))


@dataclass
class Mover:
    """A box displaced by a per-frame offset (translation only)."""

    box: Box
    offset: Callable[[int], np.ndarray]

    def at(self, frame_index: int) -> Box:
        shift = np.asarray(self.offset(frame_index), dtype=np.float64)
        return Box(self.box.lo + shift, self.box.hi + shift, self.box.texture)


@dataclass
class SyntheticScene:
    name: str
    intrinsics: Intrinsics
    n_frames: int
    camera: Callable[[int], Pose]  # world-to-camera per frame
    rects: list[Rect] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    movers: list[Mover] = field(default_factory=list)
    fps: float = 30.0
    color_noise: float = 0.0
    depth_noise: float = 0.0

    def timestamp(self, frame_index: int) -> float:
        return frame_index / self.fps


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _camera_rays(pose_w2c: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origin (3,) and directions (H, W, 3) with unit camera z."""
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs_cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    )
    c2w = pose_w2c.inverse()
    dirs_world = dirs_cam @ c2w.rotation.T
    return c2w.translation, dirs_world


def _intersect_rect(origin: np.ndarray, dirs: np.ndarray, rect: Rect) -> tuple[np.ndarray, np.ndarray]:
    """Ray parameter (H, W) and colors (H, W, 3); misses hold inf."""
    axis = rect.axis
    other = [a for a in range(3) if a != axis]
    d_axis = dirs[..., axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rect.level - origin[axis]) / d_axis
    pt_u = origin[other[0]] + t * dirs[..., other[0]]
    pt_v = origin[other[1]] + t * dirs[..., other[1]]
    hit = (
        (np.abs(d_axis) > 1e-12)
        & (t > _NEAR)
        & (pt_u >= rect.lo[0])
        & (pt_u <= rect.hi[0])
        & (pt_v >= rect.lo[1])
        & (pt_v <= rect.hi[1])
    )
    t = np.where(hit, t, np.inf)
    colors = rect.texture.colors(pt_u, pt_v)
    return t, colors


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method AABB intersection; returns entry parameter and face colors."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_lo = (box.lo - origin) * inv
    t_hi = (box.hi - origin) * inv
    t_near_axis = np.minimum(t_lo, t_hi)
    t_far_axis = np.maximum(t_lo, t_hi)
    t_enter = t_near_axis.max(axis=-1)
    t_exit = t_far_axis.min(axis=-1)
    hit = (t_exit >= t_enter) & (t_enter > _NEAR) & np.isfinite(t_enter)
    t = np.where(hit, t_enter, np.inf)
    # Texture from the two in-plane coordinates of the entry face.
    enter_axis = np.argmax(t_near_axis, axis=-1)
    point = origin[None, None, :] + t[..., None] * dirs
    h, w = t.shape
    colors = np.zeros((h, w, 3))
    for axis in range(3):
        sel = hit & (enter_axis == axis)
        if not sel.any():
            continue
        other = [a for a in range(3) if a != axis]
        colors[sel] = box.texture.colors(point[sel][:, other[0]], point[sel][:, other[1]])
    return t, colors


def render_view(
    scene: SyntheticScene,
    pose_w2c: Pose,
    frame_index: int = 0,
    include_movers: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cast one frame: color (H, W, 3), depth (H, W), static mask (H, W) uint8.

    Pixels that hit nothing have depth 0 (invalid) and black color; they are
    considered static. Mask value 1 = static, 0 = a mover is the nearest hit.
    """
    intr = scene.intrinsics
    origin, dirs = _camera_rays(pose_w2c, intr)
    best_t = np.full((intr.height, intr.width), np.inf)
    color = np.zeros((intr.height, intr.width, 3))
    dynamic = np.zeros((intr.height, intr.width), dtype=bool)

    static_prims: list[tuple[np.ndarray, np.ndarray]] = []
    for rect in scene.rects:
        static_prims.append(_intersect_rect(origin, dirs, rect))
    for box in scene.boxes:
        static_prims.append(_intersect_box(origin, dirs, box))
    for t, cols in static_prims:
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        color[closer] = cols[closer]
        dynamic[closer] = False
    if include_movers:
        for mover in scene.movers:
            t, cols = _intersect_box(origin, dirs, mover.at(frame_index))
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            color[closer] = cols[closer]
            dynamic[closer] = True

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    mask = (~dynamic).astype(np.uint8)
    return color, depth, mask


def render_frame(
    scene: SyntheticScene, frame_index: int, rng: np.random.Generator | None = None
) -> tuple[Frame, np.ndarray, Pose]:
    """Render frame k. Returns (Frame, ground-truth static mask, pose_w2c).

    Optional sensor noise (scene.color_noise / depth_noise, standard
    deviations) is drawn from rng; invalid depth stays 0.
    """
    pose = scene.camera(frame_index)
    for box in scene.boxes + [m.at(frame_index) for m in scene.movers]:
        if box.contains(pose.inverse().translation):
            raise DegenerateScene(f"camera center inside geometry at frame {frame_index}")
    color, depth, mask = render_view(scene, pose, frame_index, include_movers=True)
    if rng is not None and scene.color_noise > 0:
        color = np.clip(color + rng.normal(scale=scene.color_noise, size=color.shape), 0.0, 1.0)
    if rng is not None and scene.depth_noise > 0:
        valid = depth > 0
        depth = np.where(valid, depth + rng.normal(scale=scene.depth_noise, size=depth.shape), 0.0)
        depth = np.maximum(depth, 0.0)
    frame = Frame(
        index=frame_index,
        timestamp=scene.timestamp(frame_index),
        color=color,
        depth=depth,
        intrinsics=scene.intrinsics,
    )
    return frame, mask, pose


def ground_truth_trajectory(scene: SyntheticScene) -> Trajectory:
    traj = Trajectory()
    for k in range(scene.n_frames):
        traj.append(scene.timestamp(k), scene.camera(k).inverse())
    return traj


# ---------------------------------------------------------------------------
# Preset scenes
# ---------------------------------------------------------------------------


def _look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """World-to-camera pose with +z toward target, image y roughly world-down."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    down_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(down_hint, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.column_stack([right, down, forward])
    return Pose(c2w.T, -c2w.T @ eye)


def _palette(rng: np.random.Generator, n: int, lo: float = 0.15, hi: float = 0.9) -> np.ndarray:
    return rng.uniform(lo, hi, size=(n, 3))


def _room(rng: np.random.Generator) -> tuple[list[Rect], list[Box]]:
    rects = [
        # back wall, oversized so the full field of view is covered
        Rect(axis=2, level=3.2, lo=(-4.0, -3.0), hi=(4.0, 3.0), texture=Checker(0.13, _palette(rng, 8))),
        # floor (y points down; larger y is lower)
        Rect(axis=1, level=1.0, lo=(-4.0, 0.2), hi=(4.0, 3.2), texture=Checker(0.16, _palette(rng, 8))),
    ]
    boxes = [
        Box(
            lo=np.array([-0.95, 0.25, 1.9]),
            hi=np.array([-0.35, 1.0, 2.45]),
            texture=Checker(0.09, _palette(rng, 6)),
        ),
        Box(
            lo=np.array([0.35, 0.1, 2.3]),
            hi=np.array([0.95, 1.0, 2.85]),
            texture=Checker(0.11, _palette(rng, 6)),
        ),
    ]
    return rects, boxes


def _wobble_camera(k: int) -> Pose:
    eye = np.array(
        [
            0.10 * np.sin(2 * np.pi * k / 70.0),
            -0.04 + 0.05 * np.sin(2 * np.pi * k / 45.0 + 0.8),
            0.04 * np.sin(2 * np.pi * k / 55.0 + 1.7),
        ]
    )
    target = np.array([0.08 * np.sin(2 * np.pi * k / 90.0), 0.25, 2.6])
    return _look_at(eye, target)


def build_scene(
    name: str,
    n_frames: int | None = None,
    width: int = 320,
    height: int = 240,
    seed: int = 0,
) -> SyntheticScene:
    """Construct a named preset scene.

    Presets:
        static   moving camera, static room (50 frames by default)
        dynamic  moving camera plus two sweeping box movers (100 frames)
        still    fixed camera, static room (10 frames)
    """
    rng = np.random.default_rng(seed + 0x5EED)
    fx = 0.82 * width
    intr = Intrinsics(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)
    rects, boxes = _room(rng)

    if name == "static":
        frames = 50 if n_frames is None else n_frames
        return SyntheticScene(
            name=name, intrinsics=intr, n_frames=frames, camera=_wobble_camera, rects=rects, boxes=boxes
        )
    if name == "still":
        frames = 10 if n_frames is None else n_frames
        fixed = _look_at(np.array([0.0, -0.04, 0.0]), np.array([0.0, 0.25, 2.6]))
        return SyntheticScene(
            name=name,
            intrinsics=intr,
            n_frames=frames,
            camera=lambda k: fixed,
            rects=rects,
            boxes=boxes,
        )
    if name == "dynamic":
        frames = 100 if n_frames is None else n_frames
        span = max(frames - 1, 1)
        big = Mover(
            box=Box(
                lo=np.array([-0.25, -0.28, 1.45]),
                hi=np.array([0.25, 0.27, 1.75]),
                texture=Checker(0.07, _palette(rng, 6)),
            ),
            offset=lambda k: np.array(
                [-1.05 + 2.1 * k / span, 0.03 * np.sin(2 * np.pi * k / 25.0), 0.0]
            ),
        )
        small = Mover(
            box=Box(
                lo=np.array([-0.16, 0.3, 1.15]),
                hi=np.array([0.16, 0.62, 1.4]),
                texture=Checker(0.06, _palette(rng, 6)),
            ),
            offset=lambda k: np.array(
                [0.85 - 1.7 * k / span, 0.02 * np.sin(2 * np.pi * k / 31.0 + 1.0), 0.0]
            ),
        )
        return SyntheticScene(
            name=name,
            intrinsics=intr,
            n_frames=frames,
            camera=_wobble_camera,
            rects=rects,
            boxes=boxes,
            movers=[big, small],
        )
    raise DatasetError(f"unknown synthetic scene '{name}'")
