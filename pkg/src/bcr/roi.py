"""ROI geometry: pixel masks and the ROI/background token partition.

Token layout convention: index 0 is the CLS token, patch tokens follow
in row-major grid order, so patch (row r, col c) carries token index
r * grid_cols + c + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RoiSpec
from .errors import EmptyBackgroundError, GeometryError


@dataclass(frozen=True)
class PixelMask:
    """Binary H x W mask; coverage is the fraction of set pixels."""

    data: np.ndarray
    coverage: float

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.uint8).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class TokenPartition:
    """Disjoint split of patch tokens into ROI and background sets.

    roi_indices and background_indices together cover {1, ..., T-1};
    the CLS token (index 0) belongs to neither.
    """

    roi_indices: frozenset[int]
    background_indices: frozenset[int]
    grid_rows: int
    grid_cols: int
    patch_size: int
    cls_index: int = 0

    @property
    def token_count(self) -> int:
        return self.grid_rows * self.grid_cols + 1

    def roi_sorted(self) -> list[int]:
        return sorted(self.roi_indices)

    def background_sorted(self) -> list[int]:
        return sorted(self.background_indices)


def build_pixel_mask(roi: RoiSpec, height: int, width: int) -> PixelMask:
    """Rasterize the union of ROI boxes into a binary mask.

    Boxes are half-open: pixel (y, x) is set iff some box satisfies
    x_min <= x < x_max and y_min <= y < y_max. Raises BoundsError if a
    box exits the image.
    """
    roi.check_bounds(height, width)
    mask = np.zeros((height, width), dtype=np.uint8)
    for (x0, y0, x1, y1) in roi.boxes:
        mask[y0:y1, x0:x1] = 1
    coverage = float(mask.sum()) / float(height * width)
    return PixelMask(data=mask, coverage=coverage)


def partition_tokens(
    roi: RoiSpec,
    height: int,
    width: int,
    patch_size: int,
    min_overlap: float = 0.0,
) -> TokenPartition:
    """Split patch tokens by whether their receptive field meets the ROI.

    With the default min_overlap of 0, any pixel overlap puts a patch in
    the ROI set. A positive min_overlap instead requires at least that
    fraction of the patch area to be covered.

    Raises GeometryError when the image is not divisible into patches
    and EmptyBackgroundError when every patch intersects the ROI (the
    attack is undefined without background tokens).
    """
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise GeometryError(
            f"{width}x{height} image not divisible by patch size {patch_size}"
        )
    mask = build_pixel_mask(roi, height, width).data
    rows, cols = height // patch_size, width // patch_size
    # Per-patch covered fraction via block reduction.
    frac = (
        mask.reshape(rows, patch_size, cols, patch_size)
        .mean(axis=(1, 3), dtype=np.float64)
    )
    if min_overlap <= 0.0:
        hits = frac > 0.0
    else:
        hits = frac >= min_overlap
    roi_idx = frozenset(
        int(r * cols + c + 1) for r, c in zip(*np.nonzero(hits))
    )
    all_idx = frozenset(range(1, rows * cols + 1))
    bg_idx = all_idx - roi_idx
    if not bg_idx:
        raise EmptyBackgroundError(
            f"ROI intersects all {rows * cols} patches; no background tokens "
            f"remain (roi_indices={sorted(roi_idx)})"
        )
    return TokenPartition(
        roi_indices=roi_idx,
        background_indices=bg_idx,
        grid_rows=rows,
        grid_cols=cols,
        patch_size=patch_size,
    )
