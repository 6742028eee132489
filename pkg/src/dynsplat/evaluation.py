"""Trajectory and image-quality metrics.

Absolute trajectory error: estimated and reference trajectories are first
associated by nearest timestamp, then rigidly aligned (rotation + translation,
no scale) by the closed-form SVD solution, and the per-frame translation
error magnitudes are summarized as RMSE and standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .trajectory import Trajectory


class AssociationError(ValueError):
    """No timestamp pairs found within the association tolerance."""


class DegenerateAlignment(ValueError):
    """Fewer than three associated poses; rigid alignment is underdetermined."""


def associate(
    estimated: Trajectory, reference: Trajectory, max_dt: float = 0.02
) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing.

    Candidate pairs within max_dt are taken in order of ascending |dt|;
    each index on either side is used at most once. Returns (est_idx, ref_idx)
    pairs sorted by estimated-trajectory index.
    """
    ts_e = np.asarray(estimated.timestamps)
    ts_r = np.asarray(reference.timestamps)
    if len(ts_e) == 0 or len(ts_r) == 0:
        raise AssociationError("empty trajectory")
    diff = np.abs(ts_e[:, None] - ts_r[None, :])
    cand_e, cand_r = np.nonzero(diff <= max_dt)
    order = np.argsort(diff[cand_e, cand_r], kind="stable")
    used_e: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for k in order:
        i, j = int(cand_e[k]), int(cand_r[k])
        if i in used_e or j in used_r:
            continue
        used_e.add(i)
        used_r.add(j)
        pairs.append((i, j))
    if not pairs:
        raise AssociationError(f"no pairs within {max_dt} s")
    pairs.sort()
    return pairs


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Least-squares rigid transform mapping source points onto target.

    Returns (R, t, well_conditioned) with R @ source[i] + t ~= target[i].
    Scale is fixed at 1. The flag is False when the point sets are close to
    collinear and the rotation is not uniquely determined.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if not (np.isfinite(src).all() and np.isfinite(tgt).all()):
        raise DegenerateAlignment("non-finite positions in alignment input")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    cross = (tgt - mu_t).T @ (src - mu_s)
    u, s, vt = np.linalg.svd(cross)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.diag([1.0, 1.0, sign if sign != 0 else 1.0])
    rot = u @ d @ vt
    t = mu_t - rot @ mu_s
    well_conditioned = bool(s[0] > 0 and s[1] > 1e-9 * s[0])
    return rot, t, well_conditioned


@dataclass
class AteReport:
    rmse: float
    std: float
    mean: float
    errors: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    n_pairs: int
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "ate_rmse_m": self.rmse,
            "ate_std_m": self.std,
            "ate_mean_m": self.mean,
            "n_pairs": self.n_pairs,
            "degenerate": self.degenerate,
        }


def ate(estimated: Trajectory, reference: Trajectory, max_dt: float = 0.02) -> AteReport:
    """Absolute trajectory error after rigid alignment of camera centers."""
    pairs = associate(estimated, reference, max_dt=max_dt)
    if len(pairs) < 3:
        raise DegenerateAlignment(f"need at least 3 associated poses, got {len(pairs)}")
    est = estimated.positions()[[i for i, _ in pairs]]
    ref = reference.positions()[[j for _, j in pairs]]
    rot, t, ok = align_rigid(est, ref)
    errors = np.linalg.norm(est @ rot.T + t - ref, axis=1)
    rmse = float(np.sqrt(np.mean(errors**2)))
    return AteReport(
        rmse=rmse,
        std=float(np.std(errors)),
        mean=float(np.mean(errors)),
        errors=errors,
        rotation=rot,
        translation=t,
        n_pairs=len(pairs),
        degenerate=not ok,
    )


def psnr(image: np.ndarray, reference: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical.

    mask, if given, selects the pixels that enter the mean squared error.
    """
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff2 = (a - b) ** 2
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != a.shape[:2]:
            raise ValueError("mask must match image height and width")
        if not sel.any():
            raise ValueError("mask selects no pixels")
        diff2 = diff2[sel]
    mse = float(np.mean(diff2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class StageTiming:
    """Per-frame wall-clock durations of one pipeline stage, in seconds."""

    samples: list[float] = field(default_factory=list)

    def add(self, seconds: float) -> None:
        self.samples.append(float(seconds))


def timing_report(stages: dict[str, list[float]], n_frames: int) -> dict:
    """Summarize stage durations: mean / median / p95 per stage plus FPS.

    FPS is n_frames divided by the summed duration of all samples of all
    stages (everything measured counts toward the frame budget).
    """
    report: dict = {"stages": {}, "n_frames": int(n_frames)}
    total = 0.0
    for name, samples in stages.items():
        arr = np.asarray(samples, dtype=np.float64)
        if arr.size == 0:
            continue
        total += float(arr.sum())
        report["stages"][name] = {
            "mean_s": float(arr.mean()),
            "median_s": float(np.median(arr)),
            "p95_s": float(np.percentile(arr, 95)),
            "total_s": float(arr.sum()),
            "n": int(arr.size),
        }
    report["total_s"] = total
    report["fps"] = float(n_frames / total) if total > 0 else math.inf
    return report
