"""Timestamped camera trajectories and their text serialization.

File format, one pose per line:

    timestamp tx ty tz qx qy qz qw

Poses in this format are camera-to-world. Internally the package tracks
world-to-camera transforms, so callers convert at this boundary.
Lines starting with '#' are comments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, quat_to_rotation, rotation_to_quat


class TrajectoryFormatError(ValueError):
    """Raised on malformed trajectory text (bad field count or parse failure)."""


@dataclass
class Trajectory:
    """Ordered camera-to-world poses with strictly increasing timestamps."""

    timestamps: list[float] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.timestamps)

    def append(self, timestamp: float, pose_c2w: Pose) -> None:
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise ValueError("timestamps must be strictly increasing")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose_c2w)

    def positions(self) -> np.ndarray:
        """Camera centers, shape (n, 3)."""
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])


def read_trajectory(path: str | Path) -> Trajectory:
    traj = Trajectory()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from exc
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        rot = quat_to_rotation(np.array([qw, qx, qy, qz]))
        traj.append(ts, Pose(rot, np.array([tx, ty, tz])))
    return traj


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in zip(traj.timestamps, traj.poses):
        qw, qx, qy, qz = rotation_to_quat(pose.rotation)
        tx, ty, tz = pose.translation
        lines.append(
            f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
