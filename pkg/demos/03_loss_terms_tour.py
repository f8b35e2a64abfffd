"""The four loss terms, on inputs small enough to check by hand.

- stat: squared gap between per-dimension mean/std of ROI vs background
- dict: residual of each ROI feature against its softmax-weighted
  projection onto the background features
- pres: mean squared drift of background features from clean values
- tv:   sum of absolute neighbor differences inside the ROI

Run: python3 demos/03_loss_terms_tour.py
"""

import numpy as np

from bcr import (
    RoiSpec,
    dictionary_loss,
    preservation_loss,
    soft_assignment,
    stat_loss,
    tv_loss,
    validate_image,
)
from bcr.roi import build_pixel_mask

print("-- statistical alignment --")
zr = [[2.0, 2.0]]
zb = [[0.0, 0.0], [0.0, 0.0]]
print(f"single ROI token at (2,2) vs background at origin: "
      f"{stat_loss(zr, zb)}  (mean gap (2,2) -> 4+4, stds both 0)")
print(f"identical sets: {stat_loss(zb, zb)}")

print("\n-- soft assignment and dictionary projection --")
zr = [[1.0, 0.0]]
zb = [[1.0, 0.0], [0.0, 1.0]]
alpha = soft_assignment(zr, zb, tau=1.0, similarity_mode="raw-dot")
print(f"assignment over two background tokens: {np.round(alpha[0], 4)} "
      f"(softmax of dot products (1, 0))")
zhat = alpha @ np.asarray(zb)
print(f"projected feature: {np.round(zhat[0], 4)}")
print(f"dictionary residual: "
      f"{dictionary_loss(zr, zb, tau=1.0, similarity_mode='raw-dot'):.4f}")
print(f"token already in the dictionary: {dictionary_loss(zr, [zr[0]], tau=1.0):.4f}")

print("\n-- lower temperature concentrates the assignment --")
for tau in (1.0, 0.1, 0.01):
    a = soft_assignment(zr, zb, tau=tau, similarity_mode="raw-dot")
    print(f"tau={tau:<5} -> {np.round(a[0], 5)}")

print("\n-- background preservation --")
clean = [[0.0, 0.0], [0.0, 0.0]]
drifted = [[3.0, 4.0], [0.0, 0.0]]
print(f"one of two tokens shifted by (3,4): "
      f"{preservation_loss(drifted, clean)}  (= 25 / 2)")

print("\n-- total variation on the ROI --")
data = np.zeros((3, 2, 2))
data[0] = [[0.0, 1.0], [1.0, 0.0]]
image = validate_image(data)
full = build_pixel_mask(RoiSpec([(0, 0, 2, 2)]), 2, 2)
print(f"2x2 checkerboard, full mask: {tv_loss(image, full)}  "
      f"(two horizontal + two vertical unit jumps)")
single = build_pixel_mask(RoiSpec([(0, 0, 1, 1)]), 2, 2)
print(f"mask covering one isolated pixel: {tv_loss(image, single)} "
      f"(no in-mask neighbor pairs)")
