"""Rigid-body transforms, pinhole camera math, and motion prediction.

Conventions used across the package:

* Poses are world-to-camera: ``p_cam = R @ p_world + t``.
* Depth means the camera-frame z coordinate, not ray length.
* Pixel coordinates are (u, v) with u along image columns (x) and v along
  rows (y); (0, 0) is the center of the top-left pixel.
* se(3) tangent vectors are 6-vectors ``[rho, phi]`` with the translational
  part first. Updates compose on the left: ``exp(xi) * T``.
* Quaternions are (w, x, y, z) in memory; disk formats that want
  (x, y, z, w) reorder at the IO boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PointBehindCamera(ValueError):
    """Raised when a projection target has camera-frame depth <= eps."""


class InvalidDepth(ValueError):
    """Raised when an unprojection is attempted with depth <= 0."""


_DEPTH_EPS = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics for an image of a fixed size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the same camera at a resized image (factor < 1 shrinks)."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if tra.shape != (3,):
            raise ValueError(f"translation must be length 3, got {tra.shape}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other) p = self(other(p))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=np.float64)
        return Pose(mat[:3, :3].copy(), mat[:3, 3].copy())

    def rotation_valid(self, tol: float = 1e-9) -> bool:
        rot = self.rotation
        ortho = np.abs(rot @ rot.T - np.eye(3)).max() <= tol
        return bool(ortho and np.linalg.det(rot) > 0)


# ---------------------------------------------------------------------------
# so(3) / se(3)
# ---------------------------------------------------------------------------


def so3_hat(phi: np.ndarray) -> np.ndarray:
    x, y, z = phi
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series fallback near zero angle."""
    phi = np.asarray(phi, dtype=np.float64)
    angle = np.linalg.norm(phi)
    hat = so3_hat(phi)
    if angle < 1e-10:
        return np.eye(3) + hat + 0.5 * (hat @ hat)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * hat + b * (hat @ hat)


def so3_log(rot: np.ndarray) -> np.ndarray:
    cos_angle = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-10:
        return np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) * 0.5
    if angle > np.pi - 1e-6:
        # Near pi the off-diagonal formula degenerates; recover the axis from
        # the diagonal and take signs from the skew part where informative.
        axis = np.sqrt(np.maximum((np.diag(rot) + 1.0) * 0.5, 0.0))
        signs = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
        axis = axis * np.where(signs < 0, -1.0, 1.0)
        axis /= max(np.linalg.norm(axis), 1e-12)
        return axis * angle
    factor = angle / (2.0 * np.sin(angle))
    return factor * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    hat = so3_hat(phi)
    if angle < 1e-8:
        return np.eye(3) + 0.5 * hat + (hat @ hat) / 6.0
    a = (1.0 - np.cos(angle)) / (angle * angle)
    b = (angle - np.sin(angle)) / (angle ** 3)
    return np.eye(3) + a * hat + b * (hat @ hat)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of ``[rho, phi]`` to a Pose."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    rot = so3_exp(phi)
    return Pose(rot, _so3_left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    jac_inv = np.linalg.inv(_so3_left_jacobian(phi))
    return np.concatenate([jac_inv @ pose.translation, phi])


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------


def quat_to_rotation(quat: np.ndarray) -> np.ndarray:
    quat = np.asarray(quat, dtype=np.float64)
    quat = quat / np.linalg.norm(quat)
    w, x, y, z = quat
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    rot = np.asarray(rot, dtype=np.float64)
    trace = np.trace(rot)
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2.0
        quat = np.array(
            [0.25 * s, (rot[2, 1] - rot[1, 2]) / s, (rot[0, 2] - rot[2, 0]) / s, (rot[1, 0] - rot[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(rot)))
        if i == 0:
            s = np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
            quat = np.array(
                [(rot[2, 1] - rot[1, 2]) / s, 0.25 * s, (rot[0, 1] + rot[1, 0]) / s, (rot[0, 2] + rot[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
            quat = np.array(
                [(rot[0, 2] - rot[2, 0]) / s, (rot[0, 1] + rot[1, 0]) / s, 0.25 * s, (rot[1, 2] + rot[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
            quat = np.array(
                [(rot[1, 0] - rot[0, 1]) / s, (rot[0, 2] + rot[2, 0]) / s, (rot[1, 2] + rot[2, 1]) / s, 0.25 * s]
            )
    if quat[0] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project(pose: Pose, intrinsics: Intrinsics, point_world: np.ndarray) -> tuple[float, float]:
    """Project one world point; raises PointBehindCamera when z_cam <= eps."""
    p_cam = pose.apply(np.asarray(point_world, dtype=np.float64))
    z = p_cam[2]
    if z <= _DEPTH_EPS:
        raise PointBehindCamera(f"camera-frame depth {z:.3e} is not positive")
    u = intrinsics.fx * p_cam[0] / z + intrinsics.cx
    v = intrinsics.fy * p_cam[1] / z + intrinsics.cy
    return float(u), float(v)


def project_points(
    pose: Pose, intrinsics: Intrinsics, points_world: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch projection.

    Returns (uv (N, 2), z_cam (N,), in_front (N,) bool). Rows with
    ``in_front == False`` hold garbage uv and must be masked by the caller.
    """
    pts_cam = pose.apply(points_world)
    z = pts_cam[:, 2]
    in_front = z > _DEPTH_EPS
    z_safe = np.where(in_front, z, 1.0)
    uv = np.empty((pts_cam.shape[0], 2))
    uv[:, 0] = intrinsics.fx * pts_cam[:, 0] / z_safe + intrinsics.cx
    uv[:, 1] = intrinsics.fy * pts_cam[:, 1] / z_safe + intrinsics.cy
    return uv, z, in_front


def unproject(
    pose: Pose, intrinsics: Intrinsics, pixel: tuple[float, float], depth: float
) -> np.ndarray:
    """Lift a pixel with known camera-frame depth back to a world point."""
    if depth <= 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    u, v = pixel
    p_cam = np.array(
        [(u - intrinsics.cx) * depth / intrinsics.fx, (v - intrinsics.cy) * depth / intrinsics.fy, depth]
    )
    inv = pose.inverse()
    return inv.rotation @ p_cam + inv.translation


def unproject_points(
    pose: Pose, intrinsics: Intrinsics, pixels: np.ndarray, depths: np.ndarray
) -> np.ndarray:
    """Batch unprojection; pixels (N, 2), depths (N,) all strictly positive."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise InvalidDepth("all depths must be positive")
    pixels = np.asarray(pixels, dtype=np.float64)
    p_cam = np.empty((pixels.shape[0], 3))
    p_cam[:, 0] = (pixels[:, 0] - intrinsics.cx) * depths / intrinsics.fx
    p_cam[:, 1] = (pixels[:, 1] - intrinsics.cy) * depths / intrinsics.fy
    p_cam[:, 2] = depths
    inv = pose.inverse()
    return p_cam @ inv.rotation.T + inv.translation


def constant_velocity_delta(pose_prev: Pose, pose_prev2: Pose) -> Pose:
    """Frame-to-frame motion delta: compose(result, pose_prev2) == pose_prev."""
    return pose_prev.compose(pose_prev2.inverse())


def predict_pose(pose_prev: Pose, pose_prev2: Pose) -> Pose:
    """Constant-velocity extrapolation one frame ahead of pose_prev."""
    return constant_velocity_delta(pose_prev, pose_prev2).compose(pose_prev)
