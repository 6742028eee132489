"""Camera tracking against sparse map points.

Pose estimation minimizes a robust reprojection cost over the 6-dof pose
with map points held fixed. Each observation contributes
rho(w^2 |e|^2) where e is the pixel residual, w = 1 / scale**level is the
information weight of the feature's pyramid level, and rho is the Huber
kernel: rho(s) = s while sqrt(s) <= delta, else 2*delta*sqrt(s) - delta^2.
Minimization is Levenberg-Marquardt on the left-multiplied se(3) tangent.
After convergence, observations whose weighted residual norm exceeds
2*delta are flagged as outliers and the pose is re-optimized on the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets.frames import Frame
from .features import _POPCOUNT, FeatureConfig, FeaturePoint
from .geometry import (
    Intrinsics,
    PointBehindCamera,
    Pose,
    predict_pose,
    se3_exp,
    so3_log,
    unproject,
)


class InsufficientObservations(RuntimeError):
    """Fewer observations than needed to constrain a 6-dof pose."""


class OptimizationDiverged(RuntimeError):
    """The optimizer failed to keep the cost finite and non-increasing."""


HUBER_DELTA = math.sqrt(5.991)  # 95% chi-square quantile, 2 dof


@dataclass
class TrackerConfig:
    huber_delta: float = HUBER_DELTA
    max_iterations: int = 30
    initial_damping: float = 1e-4
    step_tolerance: float = 1e-10
    cost_tolerance: float = 1e-12
    max_consecutive_rejects: int = 5
    # trust caps per LM step; a solve on degenerate matches can otherwise
    # propose steps large enough that the exp map loses orthonormality
    max_step_rotation: float = math.pi
    max_step_translation: float = 5.0
    outlier_factor: float = 2.0  # outlier when w*|e| > factor * huber_delta
    min_inliers: int = 10  # below this the frame counts as tracking-lost
    search_window_px: float = 15.0
    spawn_exclusion_px: float = 15.0  # no new point this close to an existing one
    pyramid_scale: float = 1.25
    keyframe_inlier_ratio: float = 0.7
    keyframe_translation_m: float = 0.10
    keyframe_rotation_deg: float = 10.0


@dataclass
class Observation:
    measured: np.ndarray  # (2,) pixel
    point: np.ndarray  # (3,) world
    weight: float = 1.0  # information weight w; covariance is (1/w^2) I


@dataclass
class MapPoint:
    point_id: int
    position: np.ndarray  # (3,) world
    descriptor: np.ndarray  # (32,) uint8
    n_observed: int = 1


class MapPointStore:
    """Append-only sparse point store with stable integer ids."""

    def __init__(self) -> None:
        self._points: dict[int, MapPoint] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._points)

    def add(self, position: np.ndarray, descriptor: np.ndarray) -> MapPoint:
        point = MapPoint(self._next_id, np.asarray(position, dtype=np.float64), descriptor.copy())
        self._points[self._next_id] = point
        self._next_id += 1
        return point

    def get(self, point_id: int) -> MapPoint:
        return self._points[point_id]

    def items(self) -> list[MapPoint]:
        return list(self._points.values())

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ids (N,), positions (N, 3), descriptors (N, 32))."""
        pts = self.items()
        if not pts:
            return (
                np.zeros(0, dtype=np.int64),
                np.zeros((0, 3)),
                np.zeros((0, 32), dtype=np.uint8),
            )
        ids = np.array([p.point_id for p in pts], dtype=np.int64)
        pos = np.stack([p.position for p in pts])
        desc = np.stack([p.descriptor for p in pts])
        return ids, pos, desc


# ---------------------------------------------------------------------------
# Residuals and robust pose optimization
# ---------------------------------------------------------------------------


def residual(pose: Pose, intrinsics: Intrinsics, obs: Observation) -> np.ndarray:
    """measured - projected, in pixels. Raises PointBehindCamera like project."""
    p_cam = pose.apply(obs.point)
    z = p_cam[2]
    if z <= 1e-9:
        raise PointBehindCamera(f"map point depth {z:.3e}")
    proj = np.array(
        [intrinsics.fx * p_cam[0] / z + intrinsics.cx, intrinsics.fy * p_cam[1] / z + intrinsics.cy]
    )
    return obs.measured - proj


def _batch_residuals(
    pose: Pose, intr: Intrinsics, points: np.ndarray, measured: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residuals (N, 2), camera points (N, 3), in-front mask (N,)."""
    p_cam = pose.apply(points)
    z = p_cam[:, 2]
    ok = z > 1e-9
    z_safe = np.where(ok, z, 1.0)
    proj = np.empty_like(measured)
    proj[:, 0] = intr.fx * p_cam[:, 0] / z_safe + intr.cx
    proj[:, 1] = intr.fy * p_cam[:, 1] / z_safe + intr.cy
    return measured - proj, p_cam, ok


def _robust_cost(err: np.ndarray, ok: np.ndarray, weights: np.ndarray, delta: float) -> float:
    s = weights**2 * np.sum(err**2, axis=1)
    norm = np.sqrt(s)
    rho = np.where(norm <= delta, s, 2.0 * delta * norm - delta * delta)
    return float(np.sum(np.where(ok, rho, 0.0)))


def _residual_jacobians(p_cam: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """d(residual)/d(tangent), (N, 2, 6), for left-multiplied updates.

    The camera point moves as dp = d_rho + d_phi x p, so
    d(residual)/d(tangent) = -J_proj @ [I | -hat(p)].
    """
    n = p_cam.shape[0]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    j_proj = np.zeros((n, 2, 3))
    j_proj[:, 0, 0] = intr.fx * inv_z
    j_proj[:, 0, 2] = -intr.fx * x * inv_z2
    j_proj[:, 1, 1] = intr.fy * inv_z
    j_proj[:, 1, 2] = -intr.fy * y * inv_z2
    d_pcam = np.zeros((n, 3, 6))
    d_pcam[:, 0, 0] = 1.0
    d_pcam[:, 1, 1] = 1.0
    d_pcam[:, 2, 2] = 1.0
    # -hat(p_cam) in the rotational block
    d_pcam[:, 0, 4] = z
    d_pcam[:, 0, 5] = -y
    d_pcam[:, 1, 3] = -z
    d_pcam[:, 1, 5] = x
    d_pcam[:, 2, 3] = y
    d_pcam[:, 2, 4] = -x
    return -np.einsum("nij,njk->nik", j_proj, d_pcam)


@dataclass
class PoseOptimizationResult:
    pose: Pose
    inliers: np.ndarray  # (N,) bool over the input observations
    cost: float
    n_iterations: int
    converged: bool

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inliers))

    @property
    def inlier_ratio(self) -> float:
        return self.n_inliers / max(len(self.inliers), 1)


def _lm_minimize(
    pose: Pose,
    intr: Intrinsics,
    points: np.ndarray,
    measured: np.ndarray,
    weights: np.ndarray,
    active: np.ndarray,
    cfg: TrackerConfig,
) -> tuple[Pose, float, int, bool]:
    delta = cfg.huber_delta
    err, p_cam, ok = _batch_residuals(pose, intr, points, measured)
    ok = ok & active
    if np.count_nonzero(ok) < 6:
        raise InsufficientObservations(
            f"{np.count_nonzero(ok)} usable observations after behind-camera exclusion"
        )
    cost = _robust_cost(err, ok, weights, delta)
    if not np.isfinite(cost):
        raise OptimizationDiverged("non-finite initial cost")
    initial_cost = cost
    damping = cfg.initial_damping
    rejects = 0
    iterations = 0
    converged = False
    for iterations in range(1, cfg.max_iterations + 1):
        s = weights**2 * np.sum(err**2, axis=1)
        norm = np.sqrt(np.maximum(s, 1e-300))
        w_robust = np.where(norm <= delta, 1.0, delta / norm)
        w_total = np.where(ok, w_robust * weights**2, 0.0)
        jac = _residual_jacobians(np.where(ok[:, None], p_cam, [0.0, 0.0, 1.0]), intr)
        hess = np.einsum("n,nij,nik->jk", w_total, jac, jac)
        grad = np.einsum("n,nij,ni->j", w_total, jac, err)
        step = None
        try:
            step = np.linalg.solve(hess + damping * np.eye(6), -grad)
        except np.linalg.LinAlgError:
            pass
        if step is not None and (
            np.linalg.norm(step[:3]) > cfg.max_step_translation
            or np.linalg.norm(step[3:]) > cfg.max_step_rotation
        ):
            step = None  # outside the trust region, escalate damping instead
        if step is None or not np.all(np.isfinite(step)):
            damping *= 4.0
            rejects += 1
            if rejects >= cfg.max_consecutive_rejects:
                raise OptimizationDiverged(
                    f"{rejects} consecutive damping escalations without progress"
                )
            continue
        trial = se3_exp(step).compose(pose)
        t_err, t_pcam, t_ok = _batch_residuals(trial, intr, points, measured)
        t_ok = t_ok & active
        trial_cost = _robust_cost(t_err, t_ok, weights, delta)
        if np.isfinite(trial_cost) and trial_cost <= cost:
            improvement = cost - trial_cost
            pose, err, p_cam, ok, cost = trial, t_err, t_pcam, t_ok, trial_cost
            damping = max(damping * 0.5, 1e-12)
            rejects = 0
            if np.linalg.norm(step) < cfg.step_tolerance or improvement <= cfg.cost_tolerance * max(
                cost, 1.0
            ):
                converged = True
                break
        elif np.isfinite(trial_cost) and trial_cost - cost <= 1e-12 * max(cost, 1.0):
            # uphill only by rounding noise: the minimum is resolved as far
            # as float64 allows, stop cleanly instead of calling it diverged
            converged = True
            break
        else:
            damping *= 4.0
            rejects += 1
            if rejects >= cfg.max_consecutive_rejects:
                raise OptimizationDiverged(
                    f"{rejects} consecutive damping escalations without progress"
                )
    if not np.isfinite(cost) or cost > initial_cost + 1e-9:
        raise OptimizationDiverged(f"cost rose from {initial_cost:.6g} to {cost:.6g}")
    return pose, cost, iterations, converged


def optimize_pose(
    initial: Pose, intr: Intrinsics, observations: list[Observation], cfg: TrackerConfig
) -> PoseOptimizationResult:
    """Robust two-pass pose refinement.

    Pass one optimizes over everything with the Huber kernel; observations
    with weighted residual norm above outlier_factor * huber_delta are then
    dropped and the pose is re-optimized on the inliers. The returned inlier
    flags are evaluated at the final pose.
    """
    if len(observations) < 6:
        raise InsufficientObservations(f"need at least 6 observations, got {len(observations)}")
    points = np.stack([o.point for o in observations])
    measured = np.stack([o.measured for o in observations])
    weights = np.array([o.weight for o in observations])
    active = np.ones(len(observations), dtype=bool)

    pose, cost, iters, converged = _lm_minimize(initial, intr, points, measured, weights, active, cfg)

    def flag_inliers(at_pose: Pose) -> np.ndarray:
        err, _, ok = _batch_residuals(at_pose, intr, points, measured)
        norm = weights * np.linalg.norm(err, axis=1)
        return ok & (norm <= cfg.outlier_factor * cfg.huber_delta)

    inliers = flag_inliers(pose)
    if inliers.sum() >= 6 and not inliers.all():
        pose, cost, more_iters, converged = _lm_minimize(
            pose, intr, points, measured, weights, inliers, cfg
        )
        iters += more_iters
        inliers = flag_inliers(pose)
    return PoseOptimizationResult(
        pose=pose, inliers=inliers, cost=cost, n_iterations=iters, converged=converged
    )


# ---------------------------------------------------------------------------
# Frame-level tracking helpers
# ---------------------------------------------------------------------------


def match_to_map(
    store: MapPointStore,
    features: list[FeaturePoint],
    descriptors: np.ndarray,
    predicted_pose: Pose,
    intr: Intrinsics,
    cfg: TrackerConfig,
    feat_cfg: FeatureConfig,
) -> list[tuple[int, int]]:
    """Associate detected features with map points near their predictions.

    Map points are projected at the predicted pose; features inside the
    square search window compete by descriptor distance, greedily one-to-one
    from the smallest distance up, gated by the matcher's distance ceiling.
    Returns (feature_index, point_id) pairs.
    """
    ids, positions, stored_desc = store.arrays()
    if len(ids) == 0 or not features:
        return []
    p_cam = predicted_pose.apply(positions)
    z = p_cam[:, 2]
    visible = z > 1e-9
    if not visible.any():
        return []
    z_safe = np.where(visible, z, 1.0)
    proj = np.column_stack(
        [intr.fx * p_cam[:, 0] / z_safe + intr.cx, intr.fy * p_cam[:, 1] / z_safe + intr.cy]
    )
    feat_xy = np.array([[f.x, f.y] for f in features])
    # square window: both coordinate gaps within the search radius
    close = (
        (np.abs(proj[:, 0][:, None] - feat_xy[None, :, 0]) <= cfg.search_window_px)
        & (np.abs(proj[:, 1][:, None] - feat_xy[None, :, 1]) <= cfg.search_window_px)
        & visible[:, None]
    )
    if not close.any():
        return []
    # descriptor distances only for pairs that passed the window gate; the
    # full matrix would dominate frame time once the store grows
    cand_rows, cand_cols = np.nonzero(close)
    xor = stored_desc[cand_rows] ^ descriptors[cand_cols]
    cand_dist = _POPCOUNT[xor].sum(axis=1).astype(np.float64)
    keep = cand_dist <= feat_cfg.match_max_distance
    point_rows, feat_cols = cand_rows[keep], cand_cols[keep]
    order = np.argsort(cand_dist[keep], kind="stable")
    used_points: set[int] = set()
    used_feats: set[int] = set()
    matches: list[tuple[int, int]] = []
    for k in order:
        pi, fi = int(point_rows[k]), int(feat_cols[k])
        if pi in used_points or fi in used_feats:
            continue
        used_points.add(pi)
        used_feats.add(fi)
        matches.append((fi, int(ids[pi])))
    matches.sort()
    return matches


def observations_from_matches(
    store: MapPointStore,
    features: list[FeaturePoint],
    matches: list[tuple[int, int]],
    cfg: TrackerConfig,
) -> list[Observation]:
    obs = []
    for feat_idx, point_id in matches:
        feat = features[feat_idx]
        obs.append(
            Observation(
                measured=np.array([feat.x, feat.y]),
                point=store.get(point_id).position,
                weight=1.0 / (cfg.pyramid_scale**feat.level),
            )
        )
    return obs


def covered_feature_indices(
    store: MapPointStore,
    features: list[FeaturePoint],
    pose: Pose,
    intr: Intrinsics,
    cfg: TrackerConfig,
) -> set[int]:
    """Features already represented by a point projecting nearby.

    Spawning a second point for the same landmark leaves the matcher with
    two candidates whose positions differ by the pose drift between their
    keyframes, and pose estimates then wander between the generations. Only
    features in image regions with no existing point may seed new ones.
    """
    ids, positions, _ = store.arrays()
    if len(ids) == 0 or not features:
        return set()
    p_cam = pose.apply(positions)
    z = p_cam[:, 2]
    visible = z > 1e-9
    if not visible.any():
        return set()
    p_vis = p_cam[visible]
    proj = np.column_stack(
        [
            intr.fx * p_vis[:, 0] / p_vis[:, 2] + intr.cx,
            intr.fy * p_vis[:, 1] / p_vis[:, 2] + intr.cy,
        ]
    )
    feat_xy = np.array([[f.x, f.y] for f in features])
    r = cfg.spawn_exclusion_px
    near = (np.abs(proj[:, 0][None, :] - feat_xy[:, 0][:, None]) <= r) & (
        np.abs(proj[:, 1][None, :] - feat_xy[:, 1][:, None]) <= r
    )
    return set(np.nonzero(near.any(axis=1))[0].tolist())


def spawn_map_points(
    store: MapPointStore,
    frame: Frame,
    pose: Pose,
    features: list[FeaturePoint],
    descriptors: np.ndarray,
    skip_indices: set[int],
) -> list[int]:
    """Instantiate new map points by unprojecting unmatched features.

    Depth sensors make triangulation unnecessary: the feature's depth sample
    lifts it to 3D directly. Features without valid depth are skipped.
    """
    h, w = frame.depth.shape
    new_ids = []
    for idx, feat in enumerate(features):
        if idx in skip_indices:
            continue
        px = int(round(feat.x))
        py = int(round(feat.y))
        if not (0 <= px < w and 0 <= py < h):
            continue
        d = frame.depth[py, px]
        if d <= 0:
            continue
        position = unproject(pose, frame.intrinsics, (feat.x, feat.y), float(d))
        point = store.add(position, descriptors[idx])
        new_ids.append(point.point_id)
    return new_ids


def select_keyframe(
    inliers_now: int,
    inliers_at_last_keyframe: int,
    pose: Pose,
    last_keyframe_pose: Pose,
    cfg: TrackerConfig,
) -> bool:
    """Keyframe when tracking support decays or the camera moved enough."""
    ratio = inliers_now / max(inliers_at_last_keyframe, 1)
    if ratio < cfg.keyframe_inlier_ratio:
        return True
    rel = pose.compose(last_keyframe_pose.inverse())
    if np.linalg.norm(rel.translation) > cfg.keyframe_translation_m:
        return True
    angle = np.linalg.norm(so3_log(rel.rotation))
    return bool(angle > np.deg2rad(cfg.keyframe_rotation_deg))


@dataclass
class TrackResult:
    pose: Pose  # world-to-camera
    tracked: bool
    is_keyframe: bool
    n_matches: int
    n_inliers: int
    matches: list[tuple[int, int]]  # (feature_index, point_id)
    new_point_ids: list[int]


class Tracker:
    """Per-frame pose tracking state machine.

    Feature detection stays outside (the caller owns the adaptive threshold
    and masks); this class predicts, associates, optimizes, picks keyframes
    and grows the point store on them. When the inlier count drops below the
    floor the frame is marked untracked and the constant-velocity prediction
    stands in for the pose.
    """

    def __init__(self, intrinsics: Intrinsics, cfg: TrackerConfig, feat_cfg: FeatureConfig) -> None:
        self.intrinsics = intrinsics
        self.cfg = cfg
        self.feat_cfg = feat_cfg
        self.store = MapPointStore()
        self.poses: list[Pose] = []
        self._last_kf_pose: Pose | None = None
        self._last_kf_support = 0

    def predict(self) -> Pose:
        if not self.poses:
            return Pose.identity()
        if len(self.poses) == 1:
            return self.poses[-1]
        return predict_pose(self.poses[-1], self.poses[-2])

    def process_frame(
        self, frame: Frame, features: list[FeaturePoint], descriptors: np.ndarray
    ) -> TrackResult:
        if not self.poses:
            result = self._bootstrap(frame, features, descriptors)
        else:
            result = self._track(frame, features, descriptors)
        self.poses.append(result.pose)
        return result

    def _bootstrap(
        self, frame: Frame, features: list[FeaturePoint], descriptors: np.ndarray
    ) -> TrackResult:
        pose = Pose.identity()
        new_ids = spawn_map_points(self.store, frame, pose, features, descriptors, set())
        self._last_kf_pose = pose
        self._last_kf_support = len(new_ids)
        return TrackResult(
            pose=pose,
            tracked=True,
            is_keyframe=True,
            n_matches=0,
            n_inliers=len(new_ids),
            matches=[],
            new_point_ids=new_ids,
        )

    def _track(
        self, frame: Frame, features: list[FeaturePoint], descriptors: np.ndarray
    ) -> TrackResult:
        predicted = self.predict()
        matches = match_to_map(
            self.store, features, descriptors, predicted, self.intrinsics, self.cfg, self.feat_cfg
        )
        obs = observations_from_matches(self.store, features, matches, self.cfg)
        pose = predicted
        inlier_indices: list[int] = []
        if len(obs) >= 6:
            # The velocity extrapolation centers the match windows, but seeding
            # the optimizer with it lets flat cost directions ratchet: the
            # extrapolation doubles any drift and a shallow valley never pulls
            # it back. Start from the last optimized pose instead.
            result = None
            for start in (self.poses[-1], predicted):
                try:
                    result = optimize_pose(start, self.intrinsics, obs, self.cfg)
                except (OptimizationDiverged, InsufficientObservations):
                    result = None
                if result is not None and result.n_inliers >= self.cfg.min_inliers:
                    break
            if result is not None and result.n_inliers >= self.cfg.min_inliers:
                pose = result.pose
                inlier_indices = [i for i, ok in enumerate(result.inliers) if ok]
        tracked = bool(inlier_indices)
        if not tracked:
            # hold the last pose; extrapolating velocity through lost frames
            # compounds whatever error caused the loss
            pose = self.poses[-1]
        n_inliers = len(inlier_indices)
        for i in inlier_indices:
            self.store.get(matches[i][1]).n_observed += 1

        is_keyframe = False
        new_ids: list[int] = []
        if tracked and select_keyframe(
            n_inliers, self._last_kf_support, pose, self._last_kf_pose, self.cfg
        ):
            is_keyframe = True
            skip = {fi for fi, _ in matches}
            skip |= covered_feature_indices(self.store, features, pose, self.intrinsics, self.cfg)
            new_ids = spawn_map_points(self.store, frame, pose, features, descriptors, skip)
            self._last_kf_pose = pose
            self._last_kf_support = n_inliers + len(new_ids)
        return TrackResult(
            pose=pose,
            tracked=tracked,
            is_keyframe=is_keyframe,
            n_matches=len(matches),
            n_inliers=n_inliers,
            matches=matches,
            new_point_ids=new_ids,
        )
