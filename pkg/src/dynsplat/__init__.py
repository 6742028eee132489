"""dynsplat: RGB-D SLAM for dynamic scenes with a 3D Gaussian splat map."""

from .config import ConfigError, PipelineConfig, load_config, parse_config
from .pipeline import (
    RunResult,
    SequenceSource,
    resolve_source,
    run_pipeline,
    synthetic_source,
    tum_source,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "RunResult",
    "SequenceSource",
    "load_config",
    "parse_config",
    "resolve_source",
    "run_pipeline",
    "synthetic_source",
    "tum_source",
    "__version__",
]
