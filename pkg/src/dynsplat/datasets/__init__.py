from .frames import DatasetError, Frame
from .masks import (
    AllStaticMasks,
    CorruptedMasks,
    DirectoryMasks,
    MaskProviderError,
    SyntheticMasks,
    save_mask_png,
)
from .synthetic import (
    Box,
    Checker,
    DegenerateScene,
    Mover,
    Rect,
    SyntheticScene,
    build_scene,
    ground_truth_trajectory,
    render_frame,
    render_view,
)
from .tum import (
    DEPTH_SCALE,
    load_color,
    load_depth,
    load_tum_sequence,
    save_color_png,
    save_depth_png,
)

__all__ = [
    "AllStaticMasks",
    "Box",
    "Checker",
    "CorruptedMasks",
    "DEPTH_SCALE",
    "DatasetError",
    "DegenerateScene",
    "DirectoryMasks",
    "Frame",
    "MaskProviderError",
    "Mover",
    "Rect",
    "SyntheticMasks",
    "SyntheticScene",
    "build_scene",
    "ground_truth_trajectory",
    "load_color",
    "load_depth",
    "load_tum_sequence",
    "render_frame",
    "render_view",
    "save_color_png",
    "save_depth_png",
    "save_mask_png",
]
