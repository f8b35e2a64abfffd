"""Frozen vision-encoder contract and a miniature deterministic ViT.

The attack needs layer-wise token features that are differentiable with
respect to pixels. Real encoders plug in through the adapter registry;
the bundled ToyEncoder is a small pre-norm transformer with seeded
random frozen weights, written in float64 numpy with an explicit
reverse-mode pass so pixel gradients are exact to machine precision.

"Layer l features" means the output of transformer block l (after both
residual additions), for 1-based l.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np
from scipy.special import erf

from .core import ImageTensor
from .errors import (
    DuplicateAdapterError,
    LayerOutOfRange,
    ResolutionMismatch,
    ShapeMismatch,
    UnknownAdapterError,
)

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderDescriptor:
    """Static shape information about an encoder."""

    depth: int
    patch_size: int
    feature_dim: int
    input_resolution: int
    identifier: str = ""

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.input_resolution % self.patch_size:
            raise ValueError("input_resolution must be divisible by patch_size")

    @property
    def grid(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid * self.grid + 1

    @property
    def num_heads(self) -> int:
        d = self.feature_dim
        return d // 8 if d >= 8 and d % 8 == 0 else 1


@dataclass(frozen=True)
class LayerFeatureSet:
    """Per-layer T x D token feature matrices; row 0 is the CLS token."""

    features: Mapping[int, np.ndarray]
    token_count: int
    feature_dim: int

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.features[layer]

    def layers(self) -> list[int]:
        return sorted(self.features)


class VisionEncoder(Protocol):
    """Contract every encoder adapter must satisfy.

    features() returns the hidden states of the requested blocks for a
    (3, H, W) float pixel array; repeated calls on identical input must
    yield identical output. features_with_vjp() additionally returns a
    closure mapping per-layer cotangents dL/dZ to the pixel gradient
    dL/dx. Adapters that are not reentrant must set `reentrant = False`;
    batch drivers then serialize forward passes.
    """

    descriptor: EncoderDescriptor
    reentrant: bool

    def features(self, pixels: np.ndarray, layers: Iterable[int]) -> dict[int, np.ndarray]: ...

    def features_with_vjp(
        self, pixels: np.ndarray, layers: Iterable[int]
    ) -> tuple[dict[int, np.ndarray], Callable[[Mapping[int, np.ndarray]], np.ndarray]]: ...


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def _layernorm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, xhat, inv_std


def _layernorm_vjp(dy, xhat, inv_std, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * inv_std


def _split_heads(x, heads):
    # (T, D) -> (heads, T, D/heads)
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    # (heads, T, dh) -> (T, D)
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


class ToyEncoder:
    """Miniature frozen ViT: patch embedding, learned position embeddings,
    `depth` pre-norm self-attention + feed-forward blocks.

    Weights are drawn once from a seeded generator and never change, so
    the forward map is a fixed deterministic differentiable function of
    the pixels.
    """

    reentrant = True

    def __init__(self, seed: int, descriptor: EncoderDescriptor):
        self.descriptor = descriptor
        self.seed = int(seed)
        d = descriptor.feature_dim
        p = descriptor.patch_size
        patch_dim = 3 * p * p
        hidden = 4 * d
        rng = np.random.default_rng(self.seed)

        def w(rows, cols):
            return rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))

        self.w_embed = w(patch_dim, d)
        self.b_embed = np.zeros(d)
        self.cls = rng.normal(0.0, 0.5, size=(1, d))
        self.pos = rng.normal(0.0, 0.5, size=(descriptor.token_count, d))
        self.blocks = []
        for _ in range(descriptor.depth):
            self.blocks.append({
                "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
                "wq": w(d, d), "bq": np.zeros(d),
                "wk": w(d, d), "bk": np.zeros(d),
                "wv": w(d, d), "bv": np.zeros(d),
                "wo": w(d, d), "bo": np.zeros(d),
                "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
                "w1": w(d, hidden), "b1": np.zeros(hidden),
                "w2": w(hidden, d), "b2": np.zeros(d),
            })

    @property
    def metadata(self) -> dict:
        desc = self.descriptor
        return {
            "identifier": desc.identifier or "toy",
            "seed": self.seed,
            "depth": desc.depth,
            "patch_size": desc.patch_size,
            "feature_dim": desc.feature_dim,
            "input_resolution": desc.input_resolution,
        }

    # ------------------------------------------------------------- forward

    def _check(self, pixels: np.ndarray, layers: Iterable[int]) -> list[int]:
        desc = self.descriptor
        if pixels.shape != (3, desc.input_resolution, desc.input_resolution):
            raise ResolutionMismatch(
                f"encoder expects 3x{desc.input_resolution}x{desc.input_resolution}, "
                f"got {pixels.shape}"
            )
        wanted = sorted(int(l) for l in layers)
        if not wanted:
            raise LayerOutOfRange("at least one layer must be requested")
        for l in wanted:
            if l < 1 or l > desc.depth:
                raise LayerOutOfRange(f"layer {l} outside 1..{desc.depth}")
        return wanted

    def _patches(self, pixels: np.ndarray) -> np.ndarray:
        p = self.descriptor.patch_size
        g = self.descriptor.grid
        return (
            pixels.reshape(3, g, p, g, p)
            .transpose(1, 3, 0, 2, 4)
            .reshape(g * g, 3 * p * p)
        )

    def _patches_vjp(self, dpatches: np.ndarray) -> np.ndarray:
        p = self.descriptor.patch_size
        g = self.descriptor.grid
        return (
            dpatches.reshape(g, g, 3, p, p)
            .transpose(2, 0, 3, 1, 4)
            .reshape(3, g * p, g * p)
        )

    def _forward(self, pixels: np.ndarray, wanted: list[int], keep_cache: bool):
        heads = self.descriptor.num_heads
        dh = self.descriptor.feature_dim // heads
        scale = 1.0 / math.sqrt(dh)

        patches = self._patches(np.asarray(pixels, dtype=np.float64))
        tokens = np.vstack([self.cls, patches @ self.w_embed + self.b_embed])
        h = tokens + self.pos

        out: dict[int, np.ndarray] = {}
        cache: list[dict] = []
        for idx, blk in enumerate(self.blocks, start=1):
            h_in = h
            u1, xhat1, inv1 = _layernorm(h_in, blk["ln1_g"], blk["ln1_b"])
            q = _split_heads(u1 @ blk["wq"] + blk["bq"], heads)
            k = _split_heads(u1 @ blk["wk"] + blk["bk"], heads)
            v = _split_heads(u1 @ blk["wv"] + blk["bv"], heads)
            logits = np.einsum("htd,hsd->hts", q, k) * scale
            logits -= logits.max(axis=-1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=-1, keepdims=True)
            ctx = np.einsum("hts,hsd->htd", probs, v)
            attn = _merge_heads(ctx) @ blk["wo"] + blk["bo"]
            h_mid = h_in + attn

            u2, xhat2, inv2 = _layernorm(h_mid, blk["ln2_g"], blk["ln2_b"])
            z1 = u2 @ blk["w1"] + blk["b1"]
            a1 = _gelu(z1)
            h = h_mid + a1 @ blk["w2"] + blk["b2"]

            if idx in wanted:
                out[idx] = h.copy()
            if keep_cache:
                cache.append({
                    "xhat1": xhat1, "inv1": inv1, "q": q, "k": k, "v": v,
                    "probs": probs, "ctx": ctx,
                    "xhat2": xhat2, "inv2": inv2, "z1": z1, "a1": a1,
                })
            if idx == wanted[-1]:
                break
        return out, cache

    def features(self, pixels: np.ndarray, layers: Iterable[int]) -> dict[int, np.ndarray]:
        wanted = self._check(np.asarray(pixels), layers)
        out, _ = self._forward(pixels, wanted, keep_cache=False)
        return out

    def features_with_vjp(self, pixels: np.ndarray, layers: Iterable[int]):
        """Forward pass plus a pixel-gradient closure.

        The closure accepts {layer: dL/dZ} cotangents (any subset of the
        requested layers) and returns dL/dpixels of shape (3, H, W).
        """
        wanted = self._check(np.asarray(pixels), layers)
        out, cache = self._forward(pixels, wanted, keep_cache=True)
        heads = self.descriptor.num_heads
        dh = self.descriptor.feature_dim // heads
        scale = 1.0 / math.sqrt(dh)
        t = self.descriptor.token_count
        d = self.descriptor.feature_dim

        def vjp(cotangents: Mapping[int, np.ndarray]) -> np.ndarray:
            for l in cotangents:
                if l not in wanted:
                    raise LayerOutOfRange(f"cotangent for unrequested layer {l}")
            deepest = max(wanted)
            g = np.zeros((t, d))
            for idx in range(deepest, 0, -1):
                if idx in cotangents:
                    g = g + np.asarray(cotangents[idx], dtype=np.float64)
                blk = self.blocks[idx - 1]
                c = cache[idx - 1]
                # Feed-forward sublayer: h_out = h_mid + gelu(LN2(h_mid) w1 + b1) w2 + b2
                da1 = g @ blk["w2"].T
                dz1 = da1 * _gelu_grad(c["z1"])
                du2 = dz1 @ blk["w1"].T
                g = g + _layernorm_vjp(du2, c["xhat2"], c["inv2"], blk["ln2_g"])
                # Attention sublayer: h_mid = h_in + Attn(LN1(h_in))
                dctx = _split_heads(g @ blk["wo"].T, heads)
                dprobs = np.einsum("htd,hsd->hts", dctx, c["v"])
                dv = np.einsum("hts,htd->hsd", c["probs"], dctx)
                p = c["probs"]
                dlogits = p * (dprobs - (dprobs * p).sum(axis=-1, keepdims=True))
                dq = np.einsum("hts,hsd->htd", dlogits, c["k"]) * scale
                dk = np.einsum("hts,htd->hsd", dlogits, c["q"]) * scale
                du1 = (
                    _merge_heads(dq) @ blk["wq"].T
                    + _merge_heads(dk) @ blk["wk"].T
                    + _merge_heads(dv) @ blk["wv"].T
                )
                g = g + _layernorm_vjp(du1, c["xhat1"], c["inv1"], blk["ln1_g"])
            dpatches = g[1:] @ self.w_embed.T
            return self._patches_vjp(dpatches)

        return out, vjp


_DEFAULT_DESCRIPTOR = EncoderDescriptor(
    depth=4, patch_size=2, feature_dim=32, input_resolution=16, identifier="toy"
)


def toy_encoder(seed: int, descriptor: EncoderDescriptor | None = None) -> ToyEncoder:
    """Build the bundled miniature encoder with frozen seeded weights."""
    return ToyEncoder(seed, descriptor or _DEFAULT_DESCRIPTOR)


def extract_features(
    encoder: VisionEncoder, image: ImageTensor, layers: Iterable[int]
) -> LayerFeatureSet:
    """Hidden states of the requested blocks for one image.

    Deterministic for a frozen encoder; differentiable with respect to
    pixels via the encoder's VJP entry point. Validates that the adapter
    returned every requested layer with one consistent T x D shape.
    """
    wanted = sorted(int(l) for l in layers)
    feats = encoder.features(image.data, wanted)
    missing = [l for l in wanted if l not in feats]
    if missing:
        raise LayerOutOfRange(f"adapter returned no features for layers {missing}")
    shapes = {feats[l].shape for l in wanted}
    if len(shapes) != 1 or any(len(s) != 2 for s in shapes):
        raise ShapeMismatch(f"inconsistent feature shapes across layers: {shapes}")
    token_count, feature_dim = next(iter(shapes))
    return LayerFeatureSet(
        features={l: feats[l] for l in wanted},
        token_count=token_count,
        feature_dim=feature_dim,
    )


# ------------------------------------------------------------------ registry

_ADAPTERS: dict[str, Callable[..., VisionEncoder]] = {}


def register_adapter(name: str, factory: Callable[..., VisionEncoder]) -> None:
    """Register a named encoder factory for config-driven loading."""
    if name in _ADAPTERS:
        raise DuplicateAdapterError(f"adapter {name!r} already registered")
    _ADAPTERS[name] = factory


def create_encoder(name: str, **options) -> VisionEncoder:
    """Instantiate a registered encoder; options are adapter-specific."""
    try:
        factory = _ADAPTERS[name]
    except KeyError:
        raise UnknownAdapterError(
            f"no adapter named {name!r}; registered: {sorted(_ADAPTERS)}"
        ) from None
    return factory(**options)


def list_adapters() -> list[str]:
    return sorted(_ADAPTERS)


def _toy_factory(
    seed: int = 0,
    depth: int = 4,
    patch_size: int = 2,
    feature_dim: int = 32,
    input_resolution: int = 16,
    identifier: str = "toy",
) -> ToyEncoder:
    desc = EncoderDescriptor(
        depth=int(depth),
        patch_size=int(patch_size),
        feature_dim=int(feature_dim),
        input_resolution=int(input_resolution),
        identifier=identifier,
    )
    return ToyEncoder(int(seed), desc)


register_adapter("toy", _toy_factory)
