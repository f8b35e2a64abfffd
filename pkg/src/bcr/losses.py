"""Loss terms of the background-consistent re-encoding objective.

Four terms drive the attack: a statistical alignment term matching
per-dimension moments of ROI and background tokens, a dictionary term
pulling each ROI feature onto a convex combination of background
features, a preservation term anchoring background features to their
clean values, and a total-variation smoothness term on the pixels.

Every term comes in two flavours: a plain evaluation returning the
scalar, and a `*_with_grad` variant that also returns the analytic
gradients used by the optimizer. Gradients are exact (verified against
central finite differences in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import AttackConfig, ImageTensor
from .encoder import LayerFeatureSet
from .errors import EmptySetError, ShapeMismatch
from .roi import PixelMask, TokenPartition

_SIGMA_EPS = 1e-8
_NORM_GUARD = 1e-12


def _as_tokens(z, name: str) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be a 2-D token matrix, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptySetError(f"{name} is empty")
    return arr


def _check_pair(zr, zb):
    zr = _as_tokens(zr, "roi features")
    zb = _as_tokens(zb, "background features")
    if zr.shape[1] != zb.shape[1]:
        raise ShapeMismatch(
            f"feature dims differ: {zr.shape[1]} vs {zb.shape[1]}"
        )
    return zr, zb


# ------------------------------------------------------- statistical moments

def stat_loss_with_grad(zr, zb):
    """Squared gap between per-dimension mean and standard deviation.

    Standard deviations are population (divide by N) with a 1e-8
    stabilizer inside the square root, so single-token sets are valid
    and the gradient stays finite at zero variance.
    """
    zr, zb = _check_pair(zr, zb)
    nr, nb = zr.shape[0], zb.shape[0]
    mu_r, mu_b = zr.mean(axis=0), zb.mean(axis=0)
    sig_r = np.sqrt(zr.var(axis=0) + _SIGMA_EPS)
    sig_b = np.sqrt(zb.var(axis=0) + _SIGMA_EPS)
    dmu = mu_r - mu_b
    dsig = sig_r - sig_b
    value = float((dmu * dmu).sum() + (dsig * dsig).sum())
    dzr = 2.0 * dmu / nr + 2.0 * dsig * (zr - mu_r) / (nr * sig_r)
    dzb = -2.0 * dmu / nb - 2.0 * dsig * (zb - mu_b) / (nb * sig_b)
    return value, dzr, dzb


def stat_loss(zr, zb) -> float:
    value, _, _ = stat_loss_with_grad(zr, zb)
    return value


# ------------------------------------------------------------ soft assignment

def _similarity(zr, zb, similarity_mode: str):
    """Similarity matrix plus the pieces its VJP needs."""
    if similarity_mode == "raw-dot":
        return zr @ zb.T, None
    if similarity_mode == "cosine":
        norm_r = np.linalg.norm(zr, axis=1)
        norm_b = np.linalg.norm(zb, axis=1)
        safe_r = norm_r + _NORM_GUARD
        safe_b = norm_b + _NORM_GUARD
        u = zr / safe_r[:, None]
        w = zb / safe_b[:, None]
        return u @ w.T, (u, w, norm_r, norm_b, safe_r, safe_b)
    raise ValueError(f"unknown similarity_mode {similarity_mode!r}")


def _similarity_vjp(ds, zr, zb, similarity_mode, extras):
    if similarity_mode == "raw-dot":
        return ds @ zb, ds.T @ zr
    u, w, norm_r, norm_b, safe_r, safe_b = extras
    du = ds @ w
    dw = ds.T @ u
    nr = np.maximum(norm_r, _NORM_GUARD)
    nb = np.maximum(norm_b, _NORM_GUARD)
    dzr = du / safe_r[:, None] - zr * (
        (du * zr).sum(axis=1) / (nr * safe_r**2)
    )[:, None]
    dzb = dw / safe_b[:, None] - zb * (
        (dw * zb).sum(axis=1) / (nb * safe_b**2)
    )[:, None]
    return dzr, dzb


def soft_assignment(zr, zb, tau: float, similarity_mode: str = "cosine") -> np.ndarray:
    """Row-stochastic assignment of each ROI token over background tokens.

    Row i is softmax_j(sim(zr_i, zb_j) / tau), computed with row-max
    subtraction for stability.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    zr, zb = _check_pair(zr, zb)
    sims, _ = _similarity(zr, zb, similarity_mode)
    logits = sims / tau
    logits -= logits.max(axis=1, keepdims=True)
    alpha = np.exp(logits)
    alpha /= alpha.sum(axis=1, keepdims=True)
    return alpha


def dictionary_loss_with_grad(zr, zb, tau: float, similarity_mode: str = "cosine"):
    """Mean squared residual of each ROI feature against its soft
    projection onto the background dictionary.

    Gradients flow through both the residual and the assignment weights,
    and through the background features on both paths.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    zr, zb = _check_pair(zr, zb)
    n_roi = zr.shape[0]
    sims, extras = _similarity(zr, zb, similarity_mode)
    logits = sims / tau
    logits -= logits.max(axis=1, keepdims=True)
    alpha = np.exp(logits)
    alpha /= alpha.sum(axis=1, keepdims=True)

    zhat = alpha @ zb
    resid = zr - zhat
    value = float((resid * resid).sum()) / n_roi

    dzhat = -2.0 * resid / n_roi
    dzr = 2.0 * resid / n_roi
    dalpha = dzhat @ zb.T
    dzb = alpha.T @ dzhat
    ds = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True)) / tau
    dzr_sim, dzb_sim = _similarity_vjp(ds, zr, zb, similarity_mode, extras)
    return value, dzr + dzr_sim, dzb + dzb_sim


def dictionary_loss(zr, zb, tau: float, similarity_mode: str = "cosine") -> float:
    value, _, _ = dictionary_loss_with_grad(zr, zb, tau, similarity_mode)
    return value


# -------------------------------------------------------------- preservation

def preservation_loss_with_grad(zb_adv, zb_clean):
    """Mean squared drift of background features from their clean values.

    zb_clean is a constant of the optimization; the gradient is with
    respect to zb_adv only.
    """
    zb_adv = _as_tokens(zb_adv, "adversarial background features")
    zb_clean = np.asarray(zb_clean, dtype=np.float64)
    if zb_adv.shape != zb_clean.shape:
        raise ShapeMismatch(
            f"background shapes differ: {zb_adv.shape} vs {zb_clean.shape}"
        )
    n = zb_adv.shape[0]
    diff = zb_adv - zb_clean
    value = float((diff * diff).sum()) / n
    return value, 2.0 * diff / n


def preservation_loss(zb_adv, zb_clean) -> float:
    value, _ = preservation_loss_with_grad(zb_adv, zb_clean)
    return value


# ----------------------------------------------------------- total variation

def tv_loss_with_grad(pixels, mask, full_image: bool = False):
    """Anisotropic total variation restricted to in-mask pixel pairs.

    Sums |x[c,h,w+1] - x[c,h,w]| and |x[c,h+1,w] - x[c,h,w]| over pairs
    whose BOTH endpoints lie inside the mask (or over all pairs when
    full_image is set). The gradient uses sign(), i.e. the usual
    subgradient that is 0 at exact ties.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatch(f"pixels must be (C, H, W), got {x.shape}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[1:]:
        raise ShapeMismatch(f"mask {m.shape} does not match image {x.shape[1:]}")
    if full_image:
        m = np.ones_like(m)
    pair_h = m[:, 1:] * m[:, :-1]
    pair_v = m[1:, :] * m[:-1, :]
    diff_h = x[:, :, 1:] - x[:, :, :-1]
    diff_v = x[:, 1:, :] - x[:, :-1, :]
    value = float((np.abs(diff_h) * pair_h).sum() + (np.abs(diff_v) * pair_v).sum())

    grad = np.zeros_like(x)
    sh = np.sign(diff_h) * pair_h
    sv = np.sign(diff_v) * pair_v
    grad[:, :, 1:] += sh
    grad[:, :, :-1] -= sh
    grad[:, 1:, :] += sv
    grad[:, :-1, :] -= sv
    return value, grad


def tv_loss(image: ImageTensor, mask: PixelMask, full_image: bool = False) -> float:
    value, _ = tv_loss_with_grad(image.data, mask.data, full_image)
    return value


# ------------------------------------------------------------------ composite

@dataclass(frozen=True)
class LossBreakdown:
    """One evaluation of the full objective.

    stat/dict/pres are summed over the configured layers, unweighted;
    total applies the lambda weights. per_layer maps each layer to its
    (stat, dict, pres) triple.
    """

    stat: float
    dict: float
    pres: float
    tv: float
    total: float
    per_layer: Mapping[int, tuple[float, float, float]]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "stat": self.stat,
            "dict": self.dict,
            "pres": self.pres,
            "tv": self.tv,
            "per_layer": {str(l): list(v) for l, v in sorted(self.per_layer.items())},
        }

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total))


def composite_loss_with_grad(
    config: AttackConfig,
    features_adv: LayerFeatureSet,
    features_clean: LayerFeatureSet,
    partition: TokenPartition,
    image_adv: ImageTensor,
    mask: PixelMask,
):
    """Full objective plus its gradients.

    Returns (breakdown, cotangents, pixel_grad) where cotangents maps
    each configured layer to dTotal/dZ of shape (T, D) and pixel_grad is
    the direct pixel-space contribution of the smoothness term. The full
    pixel gradient is encoder_vjp(cotangents) + pixel_grad.
    """
    roi_idx = partition.roi_sorted()
    bg_idx = partition.background_sorted()
    stat_sum = dict_sum = pres_sum = 0.0
    per_layer: dict[int, tuple[float, float, float]] = {}
    cotangents: dict[int, np.ndarray] = {}

    for layer in sorted(config.layers):
        z = features_adv[layer]
        z_clean = features_clean[layer]
        zr, zb = z[roi_idx], z[bg_idx]
        zb_clean = z_clean[bg_idx]

        s_val, s_dzr, s_dzb = stat_loss_with_grad(zr, zb)
        d_val, d_dzr, d_dzb = dictionary_loss_with_grad(
            zr, zb, config.tau, config.similarity_mode
        )
        p_val, p_dzb = preservation_loss_with_grad(zb, zb_clean)

        stat_sum += s_val
        dict_sum += d_val
        pres_sum += p_val
        per_layer[layer] = (s_val, d_val, p_val)

        cot = np.zeros_like(z)
        cot[roi_idx] = config.lambda_stat * s_dzr + config.lambda_dict * d_dzr
        cot[bg_idx] = (
            config.lambda_stat * s_dzb
            + config.lambda_dict * d_dzb
            + config.lambda_pres * p_dzb
        )
        cotangents[layer] = cot

    tv_val, tv_grad = tv_loss_with_grad(
        image_adv.data, mask.data, config.tv_on_full_image
    )
    total = (
        config.lambda_stat * stat_sum
        + config.lambda_dict * dict_sum
        + config.lambda_pres * pres_sum
        + config.lambda_tv * tv_val
    )
    breakdown = LossBreakdown(
        stat=stat_sum,
        dict=dict_sum,
        pres=pres_sum,
        tv=tv_val,
        total=total,
        per_layer=per_layer,
    )
    return breakdown, cotangents, config.lambda_tv * tv_grad


def composite_loss(
    config: AttackConfig,
    features_adv: LayerFeatureSet,
    features_clean: LayerFeatureSet,
    partition: TokenPartition,
    image_adv: ImageTensor,
    mask: PixelMask,
) -> LossBreakdown:
    """Evaluate the full multi-layer objective."""
    breakdown, _, _ = composite_loss_with_grad(
        config, features_adv, features_clean, partition, image_adv, mask
    )
    return breakdown
