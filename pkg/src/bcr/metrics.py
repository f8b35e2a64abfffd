"""Caption-level concealment/preservation/drift metrics and image-level
perceptual fidelity metrics.

Noun-phrase extraction, text embedding, and learned perceptual distance
are injectable backends behind small registries, so the whole metric
suite runs offline: a deterministic lexicon extractor, a hashed
bag-of-words embedder, and a pixel-space distance ship as defaults.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

import numpy as np
from scipy.signal import correlate2d

from .core import ImageTensor
from .errors import (
    BackendUnavailable,
    EmbedderUnavailable,
    EmptyPhraseError,
    ExtractorUnavailable,
    ShapeMismatch,
    TooSmallError,
    UndefinedMetricError,
    ZeroVectorError,
)

_WORD = re.compile(r"[a-z0-9']+")


def _words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def head_noun(phrase: str) -> str:
    """Syntactic head of an object phrase; fallback rule: last token."""
    parts = phrase.strip().split()
    if not parts:
        raise EmptyPhraseError("cannot take the head noun of an empty phrase")
    return parts[-1].lower()


@dataclass(frozen=True)
class CaptionObjectSet:
    """Normalized object phrases extracted from one caption.

    head_nouns holds the head-noun reduction of each phrase; the two
    sets stay aligned through the same reduction rule.
    """

    phrases: frozenset[str]
    head_nouns: frozenset[str]
    source_caption: str = ""


def object_set(phrases: Iterable[str], source_caption: str = "") -> CaptionObjectSet:
    """Build a CaptionObjectSet from already-normalized phrases."""
    ph = frozenset(" ".join(p.lower().split()) for p in phrases)
    return CaptionObjectSet(
        phrases=ph,
        head_nouns=frozenset(head_noun(p) for p in ph),
        source_caption=source_caption,
    )


# ------------------------------------------------------------ object parsing

class ObjectExtractor(Protocol):
    def extract(self, caption: str) -> list[str]: ...


class LexiconExtractor:
    """Deterministic fallback parser: longest match against a fixed
    vocabulary of object phrases, lowercased, with a trailing plural 's'
    stripped from the last word of a candidate n-gram.
    """

    def __init__(self, vocabulary: Iterable[str]):
        self.vocabulary = frozenset(
            " ".join(_words(v)) for v in vocabulary if v.strip()
        )
        self._max_words = max((len(v.split()) for v in self.vocabulary), default=1)

    @classmethod
    def from_file(cls, path) -> "LexiconExtractor":
        with open(path, encoding="utf-8") as fh:
            return cls(line.strip() for line in fh if line.strip())

    def extract(self, caption: str) -> list[str]:
        words = _words(caption)
        found: list[str] = []
        i = 0
        while i < len(words):
            advanced = False
            for n in range(min(self._max_words, len(words) - i), 0, -1):
                gram = words[i:i + n]
                candidates = [" ".join(gram)]
                if gram[-1].endswith("s"):
                    candidates.append(" ".join(gram[:-1] + [gram[-1][:-1]]))
                hit = next((c for c in candidates if c in self.vocabulary), None)
                if hit is not None:
                    found.append(hit)
                    i += n
                    advanced = True
                    break
            if not advanced:
                i += 1
        return found


_EXTRACTORS: dict[str, Callable[..., ObjectExtractor]] = {
    "lexicon": LexiconExtractor,
}


def register_extractor(name: str, factory: Callable[..., ObjectExtractor]) -> None:
    _EXTRACTORS[name] = factory


def get_extractor(name: str, **options) -> ObjectExtractor:
    try:
        return _EXTRACTORS[name](**options)
    except KeyError:
        raise ExtractorUnavailable(
            f"no object extractor named {name!r}; registered: {sorted(_EXTRACTORS)}"
        ) from None


def extract_objects(caption: str, extractor) -> CaptionObjectSet:
    """Run an extractor over a caption and normalize the result.

    `extractor` is either an ObjectExtractor instance or a registered
    name. An empty caption yields an empty object set.
    """
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    return object_set(extractor.extract(caption), source_caption=caption)


# ---------------------------------------------------------- caption metrics

def concealment_success(
    target: str,
    o_clean: CaptionObjectSet,
    o_adv: CaptionObjectSet,
    use_head_nouns: bool = False,
) -> int:
    """1 iff the target appears in the clean set but not the adversarial one.

    Matches on phrases by default; the head-noun variant reduces the
    target and compares against head-noun sets.
    """
    t = " ".join(target.lower().split())
    if use_head_nouns:
        t = head_noun(t)
        return int(t in o_clean.head_nouns and t not in o_adv.head_nouns)
    return int(t in o_clean.phrases and t not in o_adv.phrases)


def global_preservation(o_clean: CaptionObjectSet, o_adv: CaptionObjectSet) -> float:
    """Fraction of clean-caption objects still present after the attack."""
    if not o_clean.phrases:
        raise UndefinedMetricError(
            "global preservation undefined for an empty clean object set"
        )
    kept = len(o_clean.phrases & o_adv.phrases)
    return kept / len(o_clean.phrases)


# ------------------------------------------------------------ text embedding

class TextEmbedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class HashedBagOfWordsEmbedder:
    """Offline deterministic sentence embedding: word counts hashed into
    a fixed-dimension vector. Stable across processes (md5, not hash()).
    """

    def __init__(self, dim: int = 256):
        self.dim = int(dim)

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for word in _words(text):
            digest = hashlib.md5(word.encode("utf-8")).digest()
            vec[int.from_bytes(digest[:8], "big") % self.dim] += 1.0
        return vec


_EMBEDDERS: dict[str, Callable[..., TextEmbedder]] = {
    "hashed-bow": HashedBagOfWordsEmbedder,
}


def register_embedder(name: str, factory: Callable[..., TextEmbedder]) -> None:
    _EMBEDDERS[name] = factory


def get_embedder(name: str, **options) -> TextEmbedder:
    try:
        return _EMBEDDERS[name](**options)
    except KeyError:
        raise EmbedderUnavailable(
            f"no text embedder named {name!r}; registered: {sorted(_EMBEDDERS)}"
        ) from None


def semantic_drift(caption_clean: str, caption_adv: str, embedder) -> float:
    """One minus the cosine similarity of the two caption embeddings.

    Identical embeddings give exactly 0; the result is clamped into
    [0, 2] against floating-point noise.
    """
    if isinstance(embedder, str):
        embedder = get_embedder(embedder)
    va = np.asarray(embedder.embed(caption_clean), dtype=np.float64)
    vb = np.asarray(embedder.embed(caption_adv), dtype=np.float64)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cannot take cosine of a zero embedding")
    if va.shape == vb.shape and np.array_equal(va, vb):
        return 0.0
    cos = float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))
    return 1.0 - cos


# ---------------------------------------------------------- image fidelity

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_RANGE = 1.0


def _ssim_kernel() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(offsets**2) / (2.0 * _SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: ImageTensor, b: ImageTensor) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5,
    K1 = 0.01, K2 = 0.03, dynamic range 1), averaged over channels.
    """
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.height < _SSIM_WINDOW or a.width < _SSIM_WINDOW:
        raise TooSmallError(
            f"image {a.width}x{a.height} smaller than the "
            f"{_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    kernel = _ssim_kernel()
    c1 = (_SSIM_K1 * _SSIM_RANGE) ** 2
    c2 = (_SSIM_K2 * _SSIM_RANGE) ** 2

    def window_mean(x):
        return correlate2d(x, kernel, mode="valid")

    scores = []
    for xa, xb in zip(a.data, b.data):
        mu_a = window_mean(xa)
        mu_b = window_mean(xb)
        var_a = window_mean(xa * xa) - mu_a * mu_a
        var_b = window_mean(xb * xb) - mu_b * mu_b
        cov = window_mean(xa * xb) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(float((num / den).mean()))
    return float(np.mean(scores))


class PerceptualBackend(Protocol):
    def distance(self, a: ImageTensor, b: ImageTensor) -> float: ...


class PixelL2Backend:
    """Offline stand-in for a learned perceptual distance: RMS pixel gap."""

    def distance(self, a: ImageTensor, b: ImageTensor) -> float:
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
        diff = a.data - b.data
        return float(np.sqrt((diff * diff).mean()))


_BACKENDS: dict[str, Callable[..., PerceptualBackend]] = {
    "pixel-l2": PixelL2Backend,
}


def register_perceptual_backend(name: str, factory: Callable[..., PerceptualBackend]) -> None:
    _BACKENDS[name] = factory


def get_perceptual_backend(name: str, **options) -> PerceptualBackend:
    try:
        return _BACKENDS[name](**options)
    except KeyError:
        raise BackendUnavailable(
            f"no perceptual backend named {name!r}; registered: {sorted(_BACKENDS)}"
        ) from None


def perceptual_distance(a: ImageTensor, b: ImageTensor, backend) -> float:
    """Score from a learned-perceptual-distance backend; 0 for identical
    inputs, non-negative always (contract enforced here).
    """
    if isinstance(backend, str):
        backend = get_perceptual_backend(backend)
    score = float(backend.distance(a, b))
    if score < 0.0:
        raise ValueError(f"perceptual backend returned a negative score {score}")
    return score


# ------------------------------------------------------------------- report

_RANGES = {
    "concealment": (0.0, 1.0),
    "global_preservation": (0.0, 1.0),
    "grounded_hallucination": (0.0, 1.0),
    "head_noun_hallucination": (0.0, 1.0),
    "semantic_drift": (0.0, 2.0),
    "ssim": (-1.0, 1.0),
    "perceptual_distance": (0.0, float("inf")),
}


@dataclass(frozen=True)
class MetricsReport:
    """Per-image metric values; fields are None when the corresponding
    inputs (captions, grounding endpoint) were not provided. flags carry
    degenerate-case markers; a flagged value is excluded from aggregates.
    """

    concealment: int | None = None
    global_preservation: float | None = None
    grounded_hallucination: float | None = None
    head_noun_hallucination: float | None = None
    semantic_drift: float | None = None
    ssim: float | None = None
    perceptual_distance: float | None = None
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(self.flags))
        for name, (lo, hi) in _RANGES.items():
            value = getattr(self, name)
            if value is None:
                continue
            if not (lo - 1e-9 <= float(value) <= hi + 1e-9):
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {
            "C": self.concealment,
            "GP": self.global_preservation,
            "GH": self.grounded_hallucination,
            "GH_head": self.head_noun_hallucination,
            "SD": self.semantic_drift,
            "SSIM": self.ssim,
            "LPIPS": self.perceptual_distance,
            "flags": list(self.flags),
        }
