"""Loader for TUM-style RGB-D sequence directories.

Expected layout::

    sequence/
        rgb.txt            # "timestamp filename" per line
        depth.txt          # "timestamp filename" per line
        rgb/*.png          # 8-bit color
        depth/*.png        # 16-bit depth, 5000 counts per meter
        groundtruth.txt    # optional reference trajectory
        calibration.txt    # optional "fx fy cx cy" single line

If associations.txt exists ("rgb_ts rgb_file depth_ts depth_file") it is used
directly; otherwise rgb and depth listings are paired by nearest timestamp
within 20 ms. Without calibration.txt the common 640x480 defaults
(fx = fy = 525.0, cx = 319.5, cy = 239.5) are assumed, rescaled if the images
have another size.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Intrinsics
from ..trajectory import Trajectory, read_trajectory, write_trajectory
from .frames import DatasetError, Frame

DEPTH_SCALE = 5000.0

_DEFAULT_CALIB = (525.0, 525.0, 319.5, 239.5)
_DEFAULT_SIZE = (640, 480)


def _read_listing(path: Path) -> list[tuple[float, str]]:
    if not path.is_file():
        raise DatasetError(f"missing listing {path}")
    entries: list[tuple[float, str]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'timestamp filename'")
        try:
            entries.append((float(parts[0]), parts[1]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: bad timestamp") from exc
    if not entries:
        raise DatasetError(f"{path}: no entries")
    return entries


def _read_associations(path: Path) -> list[tuple[float, str, str]]:
    entries: list[tuple[float, str, str]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields")
        try:
            entries.append((float(parts[0]), parts[1], parts[3]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: bad timestamp") from exc
    if not entries:
        raise DatasetError(f"{path}: no entries")
    return entries


def _pair_listings(
    rgb: list[tuple[float, str]], depth: list[tuple[float, str]], max_dt: float = 0.02
) -> list[tuple[float, str, str]]:
    ts_r = np.array([t for t, _ in rgb])
    ts_d = np.array([t for t, _ in depth])
    diff = np.abs(ts_r[:, None] - ts_d[None, :])
    cand_r, cand_d = np.nonzero(diff <= max_dt)
    order = np.argsort(diff[cand_r, cand_d], kind="stable")
    used_r: set[int] = set()
    used_d: set[int] = set()
    picked: list[tuple[float, str, str]] = []
    for k in order:
        i, j = int(cand_r[k]), int(cand_d[k])
        if i in used_r or j in used_d:
            continue
        used_r.add(i)
        used_d.add(j)
        picked.append((rgb[i][0], rgb[i][1], depth[j][1]))
    if not picked:
        raise DatasetError(f"no rgb/depth pairs within {max_dt} s")
    picked.sort()
    return picked


def load_color(path: Path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def load_depth(path: Path, scale: float = DEPTH_SCALE) -> np.ndarray:
    raw = np.asarray(Image.open(path))
    if raw.dtype not in (np.uint16, np.int32, np.uint8):
        raise DatasetError(f"{path}: unsupported depth dtype {raw.dtype}")
    return raw.astype(np.float64) / scale


def _load_calibration(root: Path, size: tuple[int, int]) -> Intrinsics:
    calib = root / "calibration.txt"
    if calib.is_file():
        parts = calib.read_text().split()
        if len(parts) < 4:
            raise DatasetError(f"{calib}: expected 'fx fy cx cy'")
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        return Intrinsics(fx, fy, cx, cy, size[0], size[1])
    fx, fy, cx, cy = _DEFAULT_CALIB
    sx = size[0] / _DEFAULT_SIZE[0]
    sy = size[1] / _DEFAULT_SIZE[1]
    return Intrinsics(fx * sx, fy * sy, cx * sx, cy * sy, size[0], size[1])


def load_tum_sequence(
    root: str | Path, max_frames: int | None = None
) -> tuple[list[Frame], Trajectory | None]:
    """Load a sequence directory into Frame objects, plus ground truth if present.

    The returned trajectory is camera-to-world as stored on disk.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    assoc_file = root / "associations.txt"
    if assoc_file.is_file():
        triplets = _read_associations(assoc_file)
    else:
        triplets = _pair_listings(_read_listing(root / "rgb.txt"), _read_listing(root / "depth.txt"))
    if max_frames is not None:
        triplets = triplets[:max_frames]

    frames: list[Frame] = []
    intr: Intrinsics | None = None
    for index, (ts, rgb_rel, depth_rel) in enumerate(triplets):
        rgb_path = root / rgb_rel
        depth_path = root / depth_rel
        if not rgb_path.is_file():
            raise DatasetError(f"missing image {rgb_path}")
        if not depth_path.is_file():
            raise DatasetError(f"missing image {depth_path}")
        color = load_color(rgb_path)
        depth = load_depth(depth_path)
        if color.shape[:2] != depth.shape:
            raise DatasetError(
                f"frame {index}: color {color.shape[:2]} vs depth {depth.shape} size mismatch"
            )
        if intr is None:
            intr = _load_calibration(root, (color.shape[1], color.shape[0]))
        frames.append(Frame(index=index, timestamp=ts, color=color, depth=depth, intrinsics=intr))

    gt_path = root / "groundtruth.txt"
    reference = read_trajectory(gt_path) if gt_path.is_file() else None
    return frames, reference


def save_depth_png(path: str | Path, depth: np.ndarray, scale: float = DEPTH_SCALE) -> None:
    counts = np.clip(np.round(depth * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(counts).save(path)


def save_color_png(path: str | Path, color: np.ndarray) -> None:
    img = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def save_sequence(
    root: str | Path,
    frames: list[Frame],
    trajectory: Trajectory | None = None,
) -> None:
    """Write frames (and optionally a camera-to-world trajectory) in the
    directory layout load_tum_sequence reads back."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    rgb_lines = []
    depth_lines = []
    for frame in frames:
        name = f"{frame.timestamp:.6f}.png"
        save_color_png(root / "rgb" / name, frame.color)
        save_depth_png(root / "depth" / name, frame.depth)
        rgb_lines.append(f"{frame.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{frame.timestamp:.6f} depth/{name}")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    if frames:
        intr = frames[0].intrinsics
        (root / "calibration.txt").write_text(f"{intr.fx} {intr.fy} {intr.cx} {intr.cy}\n")
    if trajectory is not None:
        write_trajectory(root / "groundtruth.txt", trajectory)
