"""Segment-mask providers.

A provider maps a frame index to an H x W uint8 mask (1 = static,
0 = dynamic). Where the masks come from is pluggable: nothing (all static),
PNG files produced by an external segmenter, or synthetic ground truth.
On disk the convention is 0 = dynamic, 255 = static, one file per frame
named by zero-padded frame index.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .frames import DatasetError, Frame


class MaskProviderError(DatasetError):
    pass


class AllStaticMasks:
    """Fallback provider: every pixel static."""

    def __call__(self, frame: Frame) -> np.ndarray:
        return np.ones(frame.depth.shape, dtype=np.uint8)


class DirectoryMasks:
    """PNG per frame: <dir>/<index:06d>.png, 0 = dynamic, 255 = static."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise MaskProviderError(f"{directory} is not a directory")

    def __call__(self, frame: Frame) -> np.ndarray:
        path = self.directory / f"{frame.index:06d}.png"
        if not path.is_file():
            raise MaskProviderError(f"missing mask {path}")
        raw = np.asarray(Image.open(path).convert("L"))
        if raw.shape != frame.depth.shape:
            raise MaskProviderError(
                f"{path}: mask {raw.shape} does not match frame {frame.depth.shape}"
            )
        return (raw > 127).astype(np.uint8)


class SyntheticMasks:
    """Ground-truth masks captured while rendering a synthetic scene."""

    def __init__(self, masks: dict[int, np.ndarray]):
        self.masks = masks

    def __call__(self, frame: Frame) -> np.ndarray:
        if frame.index not in self.masks:
            raise MaskProviderError(f"no synthetic mask for frame {frame.index}")
        return self.masks[frame.index].astype(np.uint8)


class CorruptedMasks:
    """Degrade another provider for robustness studies.

    dropout: probability that a frame's mask is replaced by all-static
    (a fully missed detection).
    dilate_px: grow the dynamic region by this radius (sloppy oversized masks).
    Randomness comes from the generator handed in, so runs are repeatable.
    """

    def __init__(
        self,
        base,
        rng: np.random.Generator,
        dropout: float = 0.0,
        dilate_px: int = 0,
    ):
        self.base = base
        self.rng = rng
        self.dropout = float(dropout)
        self.dilate_px = int(dilate_px)

    def __call__(self, frame: Frame) -> np.ndarray:
        mask = self.base(frame)
        if self.dropout > 0 and self.rng.uniform() < self.dropout:
            return np.ones_like(mask)
        if self.dilate_px > 0:
            dynamic = mask == 0
            size = 2 * self.dilate_px + 1
            dynamic = ndimage.binary_dilation(dynamic, structure=np.ones((size, size), dtype=bool))
            mask = (~dynamic).astype(np.uint8)
        return mask


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    img = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(img).save(path)
