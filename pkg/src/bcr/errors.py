"""Exception hierarchy shared by the whole package."""


class BcrError(Exception):
    """Base class for every error raised by this package."""


# ---------------------------------------------------------------- images/ROI

class ShapeError(BcrError):
    """Array does not have the expected 3 x H x W layout."""


class RangeError(BcrError):
    """Pixel value outside the canonical [0, 1] range."""


class BoundsError(BcrError):
    """Bounding box exits the image."""


class GeometryError(BcrError):
    """Image dimensions incompatible with the patch grid."""


class EmptyBackgroundError(BcrError):
    """ROI covers every patch token; no background tokens remain."""


# ------------------------------------------------------------------ encoders

class LayerOutOfRange(BcrError):
    """Requested layer index outside 1..depth."""


class ResolutionMismatch(BcrError):
    """Image resolution differs from the encoder's input resolution."""


class DuplicateAdapterError(BcrError):
    """Adapter name already registered."""


class UnknownAdapterError(BcrError):
    """No adapter registered under this name."""


# -------------------------------------------------------------------- losses

class EmptySetError(BcrError):
    """Token set required to be non-empty is empty."""


class ShapeMismatch(BcrError):
    """Two arrays expected to share a shape do not."""


class NonFiniteLossError(BcrError):
    """Loss became NaN or Inf during optimization.

    Carries the step index and the loss trace accumulated so far.
    """

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = list(trace) if trace is not None else []


# ------------------------------------------------------------------- metrics

class ExtractorUnavailable(BcrError):
    """No object extractor registered under this name."""


class EmptyPhraseError(BcrError):
    """Head-noun reduction called on an empty phrase."""


class UndefinedMetricError(BcrError):
    """Metric undefined for this input (e.g. empty clean object set)."""


class EmbedderUnavailable(BcrError):
    """No text embedder registered under this name."""


class ZeroVectorError(BcrError):
    """Cosine similarity undefined for a zero-norm embedding."""


class TooSmallError(BcrError):
    """Image smaller than the similarity-index sliding window."""


class BackendUnavailable(BcrError):
    """No perceptual-distance backend registered under this name."""


# ----------------------------------------------------------------- grounding

class GroundingServiceError(BcrError):
    """Grounding service unreachable or returned a malformed response."""


class UnverifiableError(BcrError):
    """Hallucination aggregate refused: at least one verdict is missing."""


# ---------------------------------------------------------------- experiment

class ParseError(BcrError):
    """Manifest or config file failed to parse."""


class MissingImageError(BcrError):
    """Manifest references an image file that does not exist."""


class InvalidBoxError(BcrError):
    """Manifest box is degenerate or malformed."""


class EmptyDatasetError(BcrError):
    """Manifest contains no items."""
