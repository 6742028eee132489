"""Config parsing, the frame loop, output artifacts, and the CLI."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dynsplat.config import ConfigError, PipelineConfig, config_keys, load_config, parse_config
from dynsplat.datasets.frames import DatasetError
from dynsplat.datasets.masks import CorruptedMasks, SyntheticMasks
from dynsplat.pipeline import (
    EXIT_OK,
    EXIT_TRACKING_LOST,
    resolve_source,
    run_pipeline,
    synthetic_source,
    tum_source,
)
from dynsplat.trajectory import read_trajectory
from dynsplat import cli


# ---------------------------------------------------------------------------
# configuration file parsing
# ---------------------------------------------------------------------------


def test_empty_config_gives_documented_defaults():
    cfg = parse_config("")
    assert cfg.features.n_f == 12
    assert cfg.dynproc.n_m == 9
    assert cfg.features.k == 0.9
    assert cfg.dynproc.sigma_m == 0.2
    assert cfg.features.sigma_0 == 0.3
    assert cfg.optimize.lambda_depth == 0.7
    assert cfg == PipelineConfig()


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# a comment\n\n   \nseed = 7  # trailing comment\n")
    assert cfg.seed == 7


def test_lambda_is_a_valid_key():
    cfg = parse_config("lambda = 0.5\n")
    assert cfg.optimize.lambda_depth == 0.5


def test_unknown_key_rejected_with_line_number():
    with pytest.raises(ConfigError, match=r":2: unknown key 'lamda'"):
        parse_config("seed = 1\nlamda = 0.5\n")


def test_missing_equals_rejected_with_line_number():
    with pytest.raises(ConfigError, match=r":1: expected key = value"):
        parse_config("just some words\n")


def test_bad_value_rejected_with_line_number():
    with pytest.raises(ConfigError, match=r":1:"):
        parse_config("seed = banana\n")


def test_sections_routed_correctly():
    cfg = parse_config(
        "tau = 0.25\nn_f = 9\nmin_inliers = 11\nbase_radius = 0.05\n"
        "optimizer = sgd\ntile_size = 8\nmax_gaussians = 500\n"
    )
    assert cfg.dynproc.tau == 0.25
    assert cfg.features.n_f == 9
    assert cfg.tracker.min_inliers == 11
    assert cfg.map.base_radius == 0.05
    assert cfg.optimize.method == "sgd"
    assert cfg.render.tile_size == 8
    assert cfg.max_gaussians == 500


def test_boolean_spellings():
    assert parse_config("use_prior_mask = off\n").use_prior_mask is False
    assert parse_config("use_prior_mask = TRUE\n").use_prior_mask is True
    with pytest.raises(ConfigError, match="boolean"):
        parse_config("use_prior_mask = 2\n")


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 42\nlambda = 0.6\n")
    cfg = load_config(path)
    assert cfg.seed == 42
    assert cfg.optimize.lambda_depth == 0.6


def test_config_keys_listing_covers_ablation_flags():
    keys = config_keys()
    assert "use_prior_mask" in keys
    assert "use_adaptive_features" in keys
    assert "lambda" in keys


# ---------------------------------------------------------------------------
# pipeline runs
# ---------------------------------------------------------------------------

FAST = {
    "width": 120,
    "height": 90,
}


def fast_config(**overrides) -> PipelineConfig:
    cfg = parse_config("map_iterations = 10\ntarget_count = 300\nmax_gaussians = 4000\n")
    for key, value in overrides.items():
        object.__setattr__(cfg, key, value)
    return cfg


def test_static_run_writes_artifacts(tmp_path):
    src = synthetic_source("static", n_frames=8, scene_seed=0, **FAST)
    res = run_pipeline(fast_config(), src, tmp_path)
    assert res.exit_code == EXIT_OK
    assert (tmp_path / "trajectory.txt").is_file()
    assert (tmp_path / "metrics.json").is_file()
    assert (tmp_path / "timing.json").is_file()
    assert (tmp_path / "metrics.txt").is_file()
    assert (tmp_path / "map.bin").is_file()
    assert list((tmp_path / "renders").glob("kf_*.png"))
    traj = read_trajectory(tmp_path / "trajectory.txt")
    assert len(traj) == 8
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["frames"] == 8
    assert metrics["keyframes"] >= 1
    assert metrics["gaussians"] == res.n_gaussians > 0


def test_dump_flags_write_masks_and_features(tmp_path):
    src = synthetic_source("static", n_frames=4, scene_seed=0, **FAST)
    res = run_pipeline(fast_config(), src, tmp_path, dump_masks=True, dump_features=True)
    assert res.exit_code == EXIT_OK
    masks = sorted((tmp_path / "masks").glob("*.png"))
    assert len(masks) == 8  # raw + refined per frame
    rows = (tmp_path / "features.csv").read_text().strip().splitlines()
    assert rows[0] == "frame,x,y,level,score"
    assert len(rows) > 4


def test_determinism_bit_identical_outputs(tmp_path):
    cfg = fast_config()
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        src = synthetic_source("dynamic", n_frames=6, scene_seed=0, **FAST)
        run_pipeline(cfg, src, out)
    assert (out_a / "trajectory.txt").read_bytes() == (out_b / "trajectory.txt").read_bytes()
    assert (out_a / "metrics.json").read_bytes() == (out_b / "metrics.json").read_bytes()
    assert (out_a / "map.bin").read_bytes() == (out_b / "map.bin").read_bytes()


def test_seed_changes_map(tmp_path):
    maps = []
    for seed in (0, 1):
        cfg = fast_config(seed=seed)
        src = synthetic_source("dynamic", n_frames=6, scene_seed=0, **FAST)
        run_pipeline(cfg, src, tmp_path / str(seed))
        maps.append((tmp_path / str(seed) / "map.bin").read_bytes())
    assert maps[0] != maps[1]


def test_disable_prior_mask_still_runs(tmp_path):
    cfg = fast_config(use_prior_mask=False)
    src = synthetic_source("dynamic", n_frames=6, scene_seed=0, **FAST)
    res = run_pipeline(cfg, src, tmp_path)
    assert res.exit_code == EXIT_OK


def test_disable_adaptive_features_still_runs(tmp_path):
    cfg = fast_config(use_adaptive_features=False)
    src = synthetic_source("dynamic", n_frames=6, scene_seed=0, **FAST)
    res = run_pipeline(cfg, src, tmp_path)
    assert res.exit_code == EXIT_OK


def test_mask_provider_substitution(tmp_path):
    base: dict[int, np.ndarray] = {}
    rng = np.random.default_rng(9)
    src = synthetic_source("dynamic", n_frames=6, scene_seed=0, **FAST)
    degraded = CorruptedMasks(src.mask_provider, rng, dropout=0.5, dilate_px=0)
    src.mask_provider = degraded
    res = run_pipeline(fast_config(), src, tmp_path)
    assert res.exit_code == EXIT_OK


def test_max_gaussians_budget_respected(tmp_path):
    cfg = fast_config()
    object.__setattr__(cfg, "max_gaussians", 120)
    src = synthetic_source("static", n_frames=6, scene_seed=0, **FAST)
    res = run_pipeline(cfg, src, tmp_path)
    assert 0 < res.n_gaussians <= 120


def test_tum_source_round_trip(tmp_path):
    # write a small sequence using the synthetic renderer, read it back
    from dynsplat.datasets.synthetic import build_scene, render_frame
    from dynsplat.datasets.tum import save_sequence
    from dynsplat.trajectory import Trajectory

    scene = build_scene("static", n_frames=4, width=80, height=60, seed=0)
    frames = []
    gt = Trajectory()
    for k in range(4):
        frame, _, pose = render_frame(scene, k)
        frames.append(frame)
        gt.append(frame.timestamp, pose.inverse())
    save_sequence(tmp_path / "seq", frames, gt)
    src = tum_source(tmp_path / "seq")
    assert src.n_frames == 4
    assert src.gt_trajectory is not None
    res = run_pipeline(fast_config(), src, tmp_path / "out")
    assert res.exit_code == EXIT_OK


def test_missing_dataset_directory_raises():
    with pytest.raises(DatasetError):
        tum_source("/nonexistent/sequence/path")


def test_resolve_source_synthetic_prefix():
    src = resolve_source("synthetic:still")
    assert src.name == "synthetic:still"
    assert src.n_frames > 0


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def run_cli(args: list[str]) -> int:
    return cli.main(args)


def test_cli_run_synthetic(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("map_iterations = 5\ntarget_count = 200\nmax_gaussians = 2000\n")
    code = run_cli(
        [
            "run",
            "--config",
            str(cfg_path),
            "--dataset",
            "synthetic:still",
            "--out",
            str(tmp_path / "out"),
            "--seed",
            "3",
        ]
    )
    assert code == 0
    assert (tmp_path / "out" / "trajectory.txt").is_file()


def test_cli_bad_config_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("lamda = 0.5\n")
    code = run_cli(
        ["run", "--config", str(cfg_path), "--dataset", "synthetic:still", "--out", str(tmp_path / "o")]
    )
    assert code == 2
    assert "unknown key" in capsys.readouterr().err


def test_cli_missing_config_file_exits_2(tmp_path, capsys):
    code = run_cli(
        ["run", "--config", str(tmp_path / "nope.cfg"), "--dataset", "synthetic:still", "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_cli_bad_dataset_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("")
    code = run_cli(
        ["run", "--config", str(cfg_path), "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]
    )
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_cli_unknown_synthetic_scene_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("")
    code = run_cli(
        ["run", "--config", str(cfg_path), "--dataset", "synthetic:nope", "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_console_entry_point_installed():
    proc = subprocess.run(
        [sys.executable, "-m", "dynsplat.cli", "run", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "--no-prior-mask" in proc.stdout
    assert "--no-adaptive-features" in proc.stdout
    assert "--dump-masks" in proc.stdout
    assert "--dump-features" in proc.stdout
