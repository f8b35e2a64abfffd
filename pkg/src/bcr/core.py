"""Shared domain types, configuration defaults, and input validation.

Pixel values live in the canonical [0, 1] space; any encoder-specific
normalization (mean/std) is the responsibility of the encoder adapter.
The l-inf budget is always measured in this canonical space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import BoundsError, RangeError, ShapeError

Box = tuple[int, int, int, int]


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.asarray(array, dtype=np.float64).copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ImageTensor:
    """A 3 x H x W pixel array with every value in [0, 1].

    The wrapped array is read-only; treat instances as immutable values.
    """

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "ImageTensor":
        return validate_image(data)


def validate_image(raw: Any) -> ImageTensor:
    """Validate a raw array as a canonical image.

    Raises ShapeError unless the array is 3 x H x W with positive H, W,
    and RangeError if any value is non-finite or outside [0, 1].
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ShapeError(f"expected a 3xHxW array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RangeError("image contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise RangeError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")
    return ImageTensor(arr)


@dataclass(frozen=True)
class RoiSpec:
    """Region of interest as a union of (x_min, y_min, x_max, y_max) boxes.

    Boxes are half-open integer intervals: x in [x_min, x_max),
    y in [y_min, y_max). Bounds against a concrete image are checked
    where the ROI is applied.
    """

    boxes: tuple[Box, ...]

    def __init__(self, boxes: Sequence[Sequence[int]]):
        if len(boxes) == 0:
            raise BoundsError("RoiSpec requires at least one box")
        canon = []
        for b in boxes:
            x0, y0, x1, y1 = (int(v) for v in b)
            if x0 < 0 or y0 < 0 or x0 >= x1 or y0 >= y1:
                raise BoundsError(f"degenerate or negative box {tuple(b)}")
            canon.append((x0, y0, x1, y1))
        object.__setattr__(self, "boxes", tuple(canon))

    def check_bounds(self, height: int, width: int) -> None:
        for (x0, y0, x1, y1) in self.boxes:
            if x1 > width or y1 > height:
                raise BoundsError(
                    f"box {(x0, y0, x1, y1)} exits a {width}x{height} image"
                )


@dataclass(frozen=True)
class AttackConfig:
    """All knobs of the concealment attack.

    epsilon is the l-inf pixel budget; steps/step_size drive the
    iterative update; layers selects which encoder blocks the feature
    losses apply to; tau is the softmax temperature of the background
    soft assignment. `similarity_mode` chooses between cosine and raw
    dot-product similarities; `step_rule` between signed and plain
    gradient steps. The two boolean flags are ablation switches:
    `roi_only_perturbation` masks the pixel update to the ROI, and
    `tv_on_full_image` lifts the ROI restriction of the smoothness term.
    """

    epsilon: float = 0.2
    step_size: float = 0.01
    steps: int = 200
    layers: frozenset[int] = frozenset({1, 2, 3, 4})
    lambda_stat: float = 1.0
    lambda_dict: float = 1.0
    lambda_pres: float = 1.0
    lambda_tv: float = 1e-3
    tau: float = 0.07
    similarity_mode: str = "cosine"
    step_rule: str = "signed-gradient"
    roi_only_perturbation: bool = False
    tv_on_full_image: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(int(l) for l in self.layers))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        for name in ("lambda_stat", "lambda_dict", "lambda_pres", "lambda_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.layers:
            raise ValueError("layers must be non-empty")
        if self.similarity_mode not in ("cosine", "raw-dot"):
            raise ValueError(f"unknown similarity_mode {self.similarity_mode!r}")
        if self.step_rule not in ("signed-gradient", "plain-gradient"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")

    def with_layers(self, layers) -> "AttackConfig":
        return replace(self, layers=frozenset(int(l) for l in layers))

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "steps": self.steps,
            "layers": sorted(self.layers),
            "lambda_stat": self.lambda_stat,
            "lambda_dict": self.lambda_dict,
            "lambda_pres": self.lambda_pres,
            "lambda_tv": self.lambda_tv,
            "tau": self.tau,
            "similarity_mode": self.similarity_mode,
            "step_rule": self.step_rule,
            "roi_only_perturbation": self.roi_only_perturbation,
            "tv_on_full_image": self.tv_on_full_image,
        }


def default_config() -> AttackConfig:
    """Default attack configuration.

    Budget 0.2, unit loss weights, smoothness weight 1e-3, temperature
    0.07, cosine similarity. The step schedule (200 signed steps of
    epsilon/20) and the four-block layer set are library choices sized
    for the bundled miniature encoder; pick the final blocks of deeper
    encoders explicitly.
    """
    return AttackConfig()


@dataclass(frozen=True)
class AttackResult:
    """Outcome of one attack run.

    loss_trace holds one LossBreakdown per optimization step, evaluated
    at the iterate the step started from. converged_linf is the realized
    max |adversarial - clean| over all pixels.
    """

    adversarial_image: ImageTensor
    loss_trace: tuple
    converged_linf: float
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def trace_totals(self) -> list[float]:
        return [b.total for b in self.loss_trace]
