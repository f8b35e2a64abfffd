"""ROI geometry: from bounding boxes to a pixel mask to the token split.

A vision transformer sees the image as a grid of patches plus one CLS
token. The attack needs to know which patch tokens can "see" the region
of interest; everything else is background. This script rasterizes a
two-box ROI on a 16x16 image, derives the token partition for 2x2
patches, and draws both as ASCII grids.

Run: python3 demos/01_roi_and_tokens.py
"""

import numpy as np

from bcr import RoiSpec, build_pixel_mask, partition_tokens
from bcr.errors import EmptyBackgroundError

HEIGHT = WIDTH = 16
PATCH = 2

roi = RoiSpec([(2, 2, 7, 7), (9, 10, 14, 15)])
mask = build_pixel_mask(roi, HEIGHT, WIDTH)

print("Two boxes, half-open pixel intervals:", roi.boxes)
print(f"Mask coverage: {mask.coverage:.3f}\n")
for row in mask.data:
    print("".join("#" if v else "." for v in row))

partition = partition_tokens(roi, HEIGHT, WIDTH, PATCH)
print(f"\nPatch grid {partition.grid_rows}x{partition.grid_cols}, "
      f"{partition.token_count} tokens including CLS (index 0)")
print(f"ROI tokens ({len(partition.roi_indices)}):", partition.roi_sorted())
print(f"Background tokens: {len(partition.background_indices)}")

grid = np.full((partition.grid_rows, partition.grid_cols), ".", dtype=object)
for idx in partition.roi_indices:
    r, c = divmod(idx - 1, partition.grid_cols)
    grid[r, c] = "R"
print("\nToken map (R = intersects ROI):")
for row in grid:
    print(" ".join(row))

# Any pixel overlap counts. A fractional threshold is available:
strict = partition_tokens(roi, HEIGHT, WIDTH, PATCH, min_overlap=0.75)
print(f"\nWith min_overlap=0.75 the ROI set shrinks from "
      f"{len(partition.roi_indices)} to {len(strict.roi_indices)} tokens")

# The split is undefined when the ROI swallows every patch:
try:
    partition_tokens(RoiSpec([(0, 0, WIDTH, HEIGHT)]), HEIGHT, WIDTH, PATCH)
except EmptyBackgroundError as exc:
    print(f"\nFull-image ROI is rejected: {exc}")
