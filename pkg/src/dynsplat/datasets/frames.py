"""Frame container shared by dataset loaders and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Intrinsics


class DatasetError(RuntimeError):
    """Missing files, malformed metadata, or inconsistent image sizes."""


@dataclass
class Frame:
    """One RGB-D observation.

    color: (H, W, 3) float64 in [0, 1].
    depth: (H, W) float64 meters; 0 marks invalid (no return / out of range).
    """

    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self) -> None:
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3):
            raise DatasetError(
                f"frame {self.index}: color {self.color.shape} does not match depth {self.depth.shape}"
            )
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise DatasetError(
                f"frame {self.index}: image {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0
