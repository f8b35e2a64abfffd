"""Iterative pixel-space optimization of the concealment objective,
plus the mask/blur obfuscation baselines.

The attack keeps the perturbation inside an l-inf ball around the clean
image and inside the valid pixel range after every step. Perturbations
are spatially unrestricted by default; the preservation loss, not a
pixel mask, protects the background (set roi_only_perturbation for the
masked ablation).
"""

from __future__ import annotations

import time

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import AttackConfig, AttackResult, ImageTensor, RoiSpec
from .encoder import LayerFeatureSet, VisionEncoder
from .errors import NonFiniteLossError, ShapeMismatch
from .losses import composite_loss_with_grad
from .roi import build_pixel_mask, partition_tokens


def linf_project_and_clamp(
    x_adv: ImageTensor, x_clean: ImageTensor, epsilon: float
) -> ImageTensor:
    """Project onto the l-inf ball around x_clean, then into [0, 1]."""
    if x_adv.data.shape != x_clean.data.shape:
        raise ShapeMismatch(
            f"image shapes differ: {x_adv.data.shape} vs {x_clean.data.shape}"
        )
    out = np.clip(x_adv.data, x_clean.data - epsilon, x_clean.data + epsilon)
    np.clip(out, 0.0, 1.0, out=out)
    return ImageTensor(out)


def _project(x_adv: np.ndarray, x_clean: np.ndarray, epsilon: float) -> np.ndarray:
    out = np.clip(x_adv, x_clean - epsilon, x_clean + epsilon)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def run_bcr_attack(
    encoder: VisionEncoder,
    image: ImageTensor,
    roi: RoiSpec,
    config: AttackConfig,
) -> AttackResult:
    """Optimize an adversarial image that re-encodes the ROI as background.

    Clean features at the configured layers are cached once; each step
    then evaluates the composite objective at the current iterate, takes
    a signed- or plain-gradient step, and projects back onto the budget.
    The loss recorded for step t is the value at the iterate the step
    started from, so the first entry is the clean-image objective.

    Raises NonFiniteLossError (carrying the partial trace) if the loss
    degenerates, and propagates partition/encoder errors unchanged.
    """
    started = time.perf_counter()
    height, width = image.height, image.width
    patch = encoder.descriptor.patch_size
    mask = build_pixel_mask(roi, height, width)
    partition = partition_tokens(roi, height, width, patch)
    layers = sorted(config.layers)

    clean = image.data
    clean_raw = encoder.features(clean, layers)
    probe = next(iter(clean_raw.values()))
    features_clean = LayerFeatureSet(
        features=clean_raw, token_count=probe.shape[0], feature_dim=probe.shape[1]
    )

    x_adv = clean.copy()
    trace = []
    for step in range(1, config.steps + 1):
        adv_raw, vjp = encoder.features_with_vjp(x_adv, layers)
        features_adv = LayerFeatureSet(
            features=adv_raw, token_count=probe.shape[0], feature_dim=probe.shape[1]
        )
        breakdown, cotangents, pixel_grad = composite_loss_with_grad(
            config, features_adv, features_clean, partition,
            ImageTensor(x_adv), mask,
        )
        if not breakdown.is_finite():
            raise NonFiniteLossError(
                f"objective became non-finite at step {step}",
                step=step, trace=trace,
            )
        grad = vjp(cotangents) + pixel_grad
        if config.roi_only_perturbation:
            grad = grad * mask.data
        if config.step_rule == "signed-gradient":
            x_adv = x_adv - config.step_size * np.sign(grad)
        else:
            x_adv = x_adv - config.step_size * grad
        x_adv = _project(x_adv, clean, config.epsilon)
        trace.append(breakdown)

    elapsed = time.perf_counter() - started
    metadata = {
        "config": config.to_dict(),
        "encoder": dict(getattr(encoder, "metadata", {})),
        "roi_tokens": len(partition.roi_indices),
        "background_tokens": len(partition.background_indices),
        "elapsed_seconds": elapsed,
    }
    return AttackResult(
        adversarial_image=ImageTensor(x_adv),
        loss_trace=tuple(trace),
        converged_linf=float(np.abs(x_adv - clean).max()),
        metadata=metadata,
    )


# ------------------------------------------------------ pixel-space baselines

def mask_roi(image: ImageTensor, roi: RoiSpec, fill_value: float = 0.5) -> ImageTensor:
    """Replace every ROI pixel with a constant; background untouched."""
    if not 0.0 <= fill_value <= 1.0:
        raise ValueError("fill_value must lie in [0, 1]")
    mask = build_pixel_mask(roi, image.height, image.width).data.astype(bool)
    out = image.data.copy()
    out[:, mask] = fill_value
    return ImageTensor(out)


def blur_roi(image: ImageTensor, roi: RoiSpec, kernel_radius: int) -> ImageTensor:
    """Replace ROI pixels with a Gaussian blur of the original image.

    The blur uses sigma = kernel_radius / 2 with a kernel truncated at
    kernel_radius and reflected boundaries; background pixels are copied
    through bitwise unchanged.
    """
    if kernel_radius < 1:
        raise ValueError("kernel_radius must be >= 1")
    mask = build_pixel_mask(roi, image.height, image.width).data.astype(bool)
    sigma = kernel_radius / 2.0
    blurred = np.stack([
        gaussian_filter(channel, sigma=sigma, mode="reflect", radius=kernel_radius)
        for channel in image.data
    ])
    out = image.data.copy()
    out[:, mask] = blurred[:, mask]
    return ImageTensor(out)
