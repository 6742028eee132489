"""Per-frame orchestration: dynamic-region processing, tracking, mapping.

Each frame flows through three stages. First the dynamic-region stage fuses
the segmentation mask with an optical-flow motion mask, updates the running
static-background depth model (using depth rendered from the Gaussian map
at the predicted pose), and refines the mask by depth consistency. Then the
tracker detects features in the static region under the adaptive threshold
and optimizes the pose. On keyframes the mapper anchors new Gaussians at
feature depths and runs a burst of photometric refinement.

All randomness (descriptor pattern, keyframe window sampling, insertion
jitter, synthetic sensor noise) is drawn from one generator seeded by the
run configuration, so identical config and seed reproduce trajectories and
metrics bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .config import PipelineConfig
from .datasets.frames import DatasetError, Frame
from .datasets.masks import AllStaticMasks, DirectoryMasks, SyntheticMasks, save_mask_png
from .datasets.synthetic import build_scene, ground_truth_trajectory, render_frame
from .datasets.tum import load_tum_sequence, save_color_png
from .dynproc import (
    BackgroundModel,
    combine_raw,
    compute_flow,
    init_background,
    motion_mask,
    refine_mask,
    update_background,
)
from .evaluation import DegenerateAlignment, ate, psnr, timing_report
from .features import adaptive_threshold, build_pyramid, describe, detect_features, make_descriptor_pattern
from .geometry import Intrinsics
from .gsmap import (
    GaussianMap,
    Keyframe,
    insert_from_features,
    optimize_map,
    render_depth_for_background,
    render_map,
    save_map,
)
from .imageops import to_grayscale
from .tracking import Tracker
from .trajectory import Trajectory, write_trajectory

EXIT_OK = 0
EXIT_DATASET = 2
EXIT_TRACKING_LOST = 3


@dataclass
class SequenceSource:
    """A frame stream plus everything the pipeline needs to consume it."""

    name: str
    intrinsics: Intrinsics
    n_frames: int
    frames: Callable[[], Iterator[Frame]]
    mask_provider: Callable[[Frame], np.ndarray]
    gt_trajectory: Trajectory | None = None


def synthetic_source(
    name: str,
    n_frames: int | None = None,
    width: int = 320,
    height: int = 240,
    scene_seed: int = 0,
    noise_rng: np.random.Generator | None = None,
    mask_provider: Callable[[Frame], np.ndarray] | None = None,
) -> SequenceSource:
    """Wrap a procedural scene as a frame source.

    Ground-truth segment masks are captured while rendering and handed to
    the mask provider, mimicking an upstream segmenter with perfect output
    (tests substitute degraded providers).
    """
    scene = build_scene(name, n_frames=n_frames, width=width, height=height, seed=scene_seed)
    gt_masks: dict[int, np.ndarray] = {}
    base_provider = SyntheticMasks(gt_masks)

    def frames() -> Iterator[Frame]:
        for k in range(scene.n_frames):
            frame, mask, _ = render_frame(scene, k, rng=noise_rng)
            gt_masks[k] = mask
            yield frame

    return SequenceSource(
        name=f"synthetic:{name}",
        intrinsics=scene.intrinsics,
        n_frames=scene.n_frames,
        frames=frames,
        mask_provider=mask_provider if mask_provider is not None else base_provider,
        gt_trajectory=ground_truth_trajectory(scene),
    )


def tum_source(root: str | Path, max_frames: int | None = None) -> SequenceSource:
    """Wrap an on-disk sequence; masks come from a masks/ directory if present."""
    frames, gt = load_tum_sequence(root, max_frames=max_frames)
    if not frames:
        raise DatasetError(f"{root}: sequence contains no frames")
    masks_dir = Path(root) / "masks"
    provider = DirectoryMasks(masks_dir) if masks_dir.is_dir() else AllStaticMasks()
    return SequenceSource(
        name=str(root),
        intrinsics=frames[0].intrinsics,
        n_frames=len(frames),
        frames=lambda: iter(frames),
        mask_provider=provider,
        gt_trajectory=gt,
    )


def resolve_source(spec: str, seed: int = 0) -> SequenceSource:
    """CLI dataset argument: 'synthetic:<name>' or a sequence directory."""
    if spec.startswith("synthetic:"):
        return synthetic_source(spec.split(":", 1)[1], scene_seed=seed)
    return tum_source(spec)


@dataclass
class RunResult:
    exit_code: int
    message: str
    trajectory: Trajectory
    metrics: dict
    timing: dict
    n_gaussians: int


def _fixed_threshold(cfg: PipelineConfig) -> float:
    # ablation: the detection threshold an all-static scene would use
    return cfg.features.sigma_0 * (1.0 - cfg.features.k)


def _insert_keyframe_gaussians(
    gmap: GaussianMap,
    frame: Frame,
    pose,
    features,
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> int:
    budget = cfg.max_gaussians - len(gmap)
    per_seed = 1 + cfg.map.n_densify
    max_seeds = budget // per_seed
    if max_seeds <= 0 or not features:
        return 0
    pixels = []
    depths = []
    colors = []
    for feat in features:
        col = int(round(feat.x))
        row = int(round(feat.y))
        if not (0 <= row < frame.depth.shape[0] and 0 <= col < frame.depth.shape[1]):
            continue
        d = frame.depth[row, col]
        if d <= 0:
            continue
        pixels.append((feat.x, feat.y))
        depths.append(d)
        colors.append(frame.color[row, col])
        if len(pixels) >= max_seeds:
            break
    if not pixels:
        return 0
    return insert_from_features(
        gmap,
        np.asarray(pixels),
        np.asarray(depths),
        np.asarray(colors),
        pose,
        frame.intrinsics,
        rng,
        cfg.map,
    )


def run_pipeline(
    cfg: PipelineConfig,
    source: SequenceSource,
    out_dir: str | Path,
    dump_masks: bool = False,
    dump_features: bool = False,
) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    renders_dir = out / "renders"
    if cfg.kf_render:
        renders_dir.mkdir(exist_ok=True)
    if dump_masks:
        (out / "masks").mkdir(exist_ok=True)
    features_file = None
    features_writer = None
    if dump_features:
        features_file = open(out / "features.csv", "w", newline="")
        features_writer = csv.writer(features_file)
        features_writer.writerow(["frame", "x", "y", "level", "score"])

    intr = source.intrinsics
    rng = np.random.default_rng(cfg.seed)
    pattern = make_descriptor_pattern(rng, cfg.features)
    tracker = Tracker(intr, cfg.tracker, cfg.features)
    gmap = GaussianMap()
    keyframes: list[Keyframe] = []
    background: BackgroundModel | None = None
    prev_gray: np.ndarray | None = None
    traj = Trajectory()
    stages: dict[str, list[float]] = {"dynproc": [], "tracking": [], "mapping": []}
    n_frames = 0
    n_lost = 0
    n_keyframes = 0
    map_skipped = 0
    kf_psnrs: list[float] = []

    try:
        for frame in source.frames():
            n_frames += 1
            gray = to_grayscale(frame.color)
            segment = source.mask_provider(frame)

            t0 = time.perf_counter()
            if prev_gray is None:
                # no flow evidence yet; absence of evidence votes static
                motion = np.ones_like(segment)
            else:
                flow = compute_flow(prev_gray, gray, cfg.dynproc)
                motion = motion_mask(flow, cfg.dynproc)
            raw = combine_raw(segment, motion)
            if cfg.use_prior_mask:
                if background is None:
                    background = init_background(frame.depth, raw)
                else:
                    rendered = (
                        render_depth_for_background(gmap, tracker.predict(), intr, cfg.render)
                        if len(gmap)
                        else None
                    )
                    background = update_background(
                        background, frame.depth, raw, rendered, cfg.dynproc
                    )
                refined = refine_mask(background, frame.depth, raw, cfg.dynproc)
            else:
                refined = raw
            stages["dynproc"].append(time.perf_counter() - t0)

            t1 = time.perf_counter()
            sigma_dy = (
                adaptive_threshold(refined, cfg.features)
                if cfg.use_adaptive_features
                else _fixed_threshold(cfg)
            )
            pyramid = build_pyramid(gray, refined, cfg.features)
            feats = detect_features(pyramid, sigma_dy, cfg.features)
            desc = describe(pyramid, feats, pattern)
            result = tracker.process_frame(frame, feats, desc)
            stages["tracking"].append(time.perf_counter() - t1)
            if not result.tracked:
                n_lost += 1
            traj.append(frame.timestamp, result.pose.inverse())

            t2 = time.perf_counter()
            if result.is_keyframe:
                n_keyframes += 1
                _insert_keyframe_gaussians(gmap, frame, result.pose, feats, cfg, rng)
                keyframes.append(
                    Keyframe(
                        frame.index,
                        result.pose,
                        frame.color,
                        frame.depth,
                        refined.astype(bool),
                    )
                )
                opt = optimize_map(
                    gmap,
                    keyframes,
                    intr,
                    rng,
                    cfg.optimize,
                    cfg.render,
                    cfg.map,
                    iterations=cfg.map_iterations,
                )
                map_skipped += opt.n_skipped
                if cfg.kf_render:
                    view = render_map(gmap, result.pose, intr, cfg.render)
                    save_color_png(renders_dir / f"kf_{frame.index}.png", view.color)
                    value = psnr(view.color, frame.color, refined.astype(bool))
                    if math.isfinite(value):
                        kf_psnrs.append(value)
            stages["mapping"].append(time.perf_counter() - t2)

            if dump_masks:
                save_mask_png(out / "masks" / f"raw_{frame.index:06d}.png", raw)
                save_mask_png(out / "masks" / f"refined_{frame.index:06d}.png", refined)
            if features_writer is not None:
                for feat in feats:
                    features_writer.writerow(
                        [frame.index, f"{feat.x:.2f}", f"{feat.y:.2f}", feat.level, feat.score]
                    )
            prev_gray = gray
    finally:
        if features_file is not None:
            features_file.close()

    if n_frames == 0:
        raise DatasetError(f"{source.name}: no frames produced")

    if cfg.final_iterations > 0 and keyframes and len(gmap):
        # offline refinement over the collected keyframes; deliberately
        # outside the per-frame stage timers, which measure the live loop
        optimize_map(
            gmap,
            keyframes,
            intr,
            rng,
            cfg.optimize,
            cfg.render,
            cfg.map,
            iterations=cfg.final_iterations,
        )

    write_trajectory(out / "trajectory.txt", traj)
    save_map(gmap, out / "map.bin")

    metrics: dict = {
        "sequence": source.name,
        "frames": n_frames,
        "keyframes": n_keyframes,
        "lost_frames": n_lost,
        "lost_fraction": n_lost / n_frames,
        "gaussians": len(gmap),
        "map_frames_skipped_empty_mask": map_skipped,
    }
    if kf_psnrs:
        metrics["mean_keyframe_psnr_db"] = float(np.mean(kf_psnrs))
        metrics["last_keyframe_psnr_db"] = float(kf_psnrs[-1])
    if source.gt_trajectory is not None and n_frames >= 3:
        try:
            report = ate(traj, source.gt_trajectory)
        except DegenerateAlignment:
            report = None
        if report is not None:
            metrics["ate_rmse_m"] = report.rmse
            metrics["ate_std_m"] = report.std
            metrics["ate_mean_m"] = report.mean
            metrics["ate_max_m"] = float(report.errors.max())
            metrics["ate_frames"] = report.n_pairs

    timing = timing_report(stages, n_frames)
    with open(out / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "timing.json", "w") as f:
        json.dump(timing, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_text_report(out / "metrics.txt", metrics, timing)

    lost_fraction = n_lost / n_frames
    if lost_fraction > 0.5:
        return RunResult(
            EXIT_TRACKING_LOST,
            f"tracking lost on {n_lost}/{n_frames} frames",
            traj,
            metrics,
            timing,
            len(gmap),
        )
    return RunResult(EXIT_OK, "ok", traj, metrics, timing, len(gmap))


def _write_text_report(path: Path, metrics: dict, timing: dict) -> None:
    lines = [f"sequence: {metrics['sequence']}"]
    lines.append(
        f"frames: {metrics['frames']}  keyframes: {metrics['keyframes']}  "
        f"lost: {metrics['lost_frames']}"
    )
    lines.append(f"gaussians: {metrics['gaussians']}")
    if "ate_rmse_m" in metrics:
        lines.append(
            f"ATE rmse: {metrics['ate_rmse_m'] * 100:.2f} cm  "
            f"std: {metrics['ate_std_m'] * 100:.2f} cm  "
            f"over {metrics['ate_frames']} frames"
        )
    if "mean_keyframe_psnr_db" in metrics:
        lines.append(f"mean keyframe PSNR: {metrics['mean_keyframe_psnr_db']:.2f} dB")
    for stage, row in timing["stages"].items():
        lines.append(
            f"{stage}: mean {row['mean_s'] * 1000:.1f} ms  "
            f"median {row['median_s'] * 1000:.1f} ms  p95 {row['p95_s'] * 1000:.1f} ms"
        )
    lines.append(f"fps: {timing['fps']:.2f}")
    path.write_text("\n".join(lines) + "\n")
