"""Flat key=value run configuration.

One documented key per tunable; an empty file reproduces the default
parameter set. Unknown keys and malformed lines are rejected with the line
number so typos fail loudly instead of silently running defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dynproc import DynprocConfig
from .features import FeatureConfig
from .gsmap import MapConfig, OptimizeConfig, RenderConfig
from .tracking import TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    dynproc: DynprocConfig = field(default_factory=DynprocConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    map: MapConfig = field(default_factory=MapConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    use_prior_mask: bool = True
    use_adaptive_features: bool = True
    max_gaussians: int = 20000
    map_iterations: int = 30  # per-keyframe budget; overrides optimize.iterations
    final_iterations: int = 0  # extra offline refinement steps after the last frame
    kf_render: bool = True  # write renders/kf_<n>.png at each keyframe


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section attribute on PipelineConfig or None for top level, field name, parser)
_KEYS: dict[str, tuple[str | None, str, type | object]] = {
    # dynamic-region processing
    "flow_threshold": ("dynproc", "flow_threshold", float),
    "flow_levels": ("dynproc", "flow_levels", int),
    "flow_window": ("dynproc", "flow_window", int),
    "flow_iterations": ("dynproc", "flow_iterations", int),
    "tau": ("dynproc", "tau", float),
    "rho": ("dynproc", "rho", float),
    "sigma_m": ("dynproc", "sigma_m", float),
    "n_m": ("dynproc", "n_m", int),
    "refine_radius": ("dynproc", "refine_radius", int),
    # features
    "sigma_0": ("features", "sigma_0", float),
    "k": ("features", "k", float),
    "n_f": ("features", "n_f", int),
    "n_levels": ("features", "n_levels", int),
    "target_count": ("features", "target_count", int),
    "cell_size": ("features", "cell_size", int),
    "match_max_distance": ("features", "match_max_distance", int),
    # tracking
    "track_max_iterations": ("tracker", "max_iterations", int),
    "min_inliers": ("tracker", "min_inliers", int),
    "search_window_px": ("tracker", "search_window_px", float),
    "keyframe_inlier_ratio": ("tracker", "keyframe_inlier_ratio", float),
    "keyframe_translation_m": ("tracker", "keyframe_translation_m", float),
    "keyframe_rotation_deg": ("tracker", "keyframe_rotation_deg", float),
    # map structure
    "base_radius": ("map", "base_radius", float),
    "n_densify": ("map", "n_densify", int),
    "prune_opacity": ("map", "prune_opacity", float),
    "prune_interval": ("map", "prune_interval", int),
    # map optimization
    "lambda": ("optimize", "lambda_depth", float),
    "window_size": ("optimize", "window_size", int),
    "optimizer": ("optimize", "method", str),
    "lr_position": ("optimize", "lr_position", float),
    "lr_color": ("optimize", "lr_color", float),
    "lr_opacity": ("optimize", "lr_opacity", float),
    "lr_scale": ("optimize", "lr_scale", float),
    "lr_rotation": ("optimize", "lr_rotation", float),
    "scene_extent": ("optimize", "scene_extent", float),
    # rendering
    "tile_size": ("render", "tile_size", int),
    "near_plane": ("render", "near_plane", float),
    # pipeline
    "seed": (None, "seed", int),
    "use_prior_mask": (None, "use_prior_mask", _parse_bool),
    "use_adaptive_features": (None, "use_adaptive_features", _parse_bool),
    "max_gaussians": (None, "max_gaussians", int),
    "map_iterations": (None, "map_iterations", int),
    "final_iterations": (None, "final_iterations", int),
    "kf_render": (None, "kf_render", _parse_bool),
}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    cfg = PipelineConfig()
    overrides: dict[str | None, dict[str, object]] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw_line.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, attr, parser = _KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from e
        overrides.setdefault(section, {})[attr] = parsed
    for section, values in overrides.items():
        if section is None:
            cfg = replace(cfg, **values)
        else:
            setattr(cfg, section, replace(getattr(cfg, section), **values))
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, source=str(path))


def config_keys() -> list[str]:
    """Documented key names, for help text and error hints."""
    return sorted(_KEYS)
