"""Grounded-hallucination verification against a phrase-grounding service.

Newly mentioned caption objects are checked for visual support: each
candidate phrase is reduced to its head noun and sent to a grounding
detector; a candidate counts as hallucinated when no detection clears
the confidence threshold. The detector itself is external; the HTTP
client here talks to any service speaking the simple JSON schema below,
and a local stub service answering from a fixture table ships for
offline runs and tests.

Wire schema: POST <endpoint> with {"image_ref": str, "phrase": str};
response {"detections": [{"box": [x, y, w, h], "confidence": float}]}.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Mapping, Protocol

import requests

from .errors import GroundingServiceError, UnverifiableError
from .metrics import CaptionObjectSet, head_noun

DEFAULT_THRESHOLD = 0.3
DEFAULT_CONCURRENCY = 4


@dataclass(frozen=True)
class GroundingBox:
    box: tuple[float, float, float, float]
    confidence: float


@dataclass(frozen=True)
class GroundingQuery:
    """One verification request: can `phrase` be localized in the image?"""

    image_ref: str
    phrase: str
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")


@dataclass(frozen=True)
class GroundingVerdict:
    """Outcome of one grounding query.

    detected is True iff some returned box has confidence strictly above
    the query threshold; max_confidence is 0 when nothing was returned.
    """

    phrase: str
    detected: bool
    max_confidence: float
    boxes: tuple[GroundingBox, ...] = ()


class GroundingClient(Protocol):
    def locate(self, image_ref: str, phrase: str) -> list[GroundingBox]: ...


class HttpGroundingClient:
    """Talks to a grounding service over HTTP; failures raise
    GroundingServiceError rather than being silently counted either way.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def locate(self, image_ref: str, phrase: str) -> list[GroundingBox]:
        try:
            response = requests.post(
                self.endpoint,
                json={"image_ref": image_ref, "phrase": phrase},
                timeout=self.timeout,
            )
            response.raise_for_status()
            payload = response.json()
        except requests.RequestException as exc:
            raise GroundingServiceError(
                f"grounding query for {phrase!r} failed: {exc}"
            ) from exc
        try:
            return [
                GroundingBox(box=tuple(float(v) for v in d["box"]),
                             confidence=float(d["confidence"]))
                for d in payload["detections"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise GroundingServiceError(
                f"malformed grounding response for {phrase!r}: {payload!r}"
            ) from exc


class FixtureGroundingClient:
    """In-process stand-in answering from a phrase -> detections table."""

    def __init__(self, table: Mapping[str, Iterable]):
        self.table = {
            phrase: [
                GroundingBox(box=tuple(float(v) for v in d["box"]),
                             confidence=float(d["confidence"]))
                for d in detections
            ]
            for phrase, detections in table.items()
        }

    @classmethod
    def from_file(cls, path) -> "FixtureGroundingClient":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def locate(self, image_ref: str, phrase: str) -> list[GroundingBox]:
        return list(self.table.get(phrase, []))


# ------------------------------------------------------------- verification

def candidate_hallucinations(
    o_clean: CaptionObjectSet, o_adv: CaptionObjectSet
) -> frozenset[str]:
    """Phrases newly introduced by the adversarial caption."""
    return frozenset(o_adv.phrases - o_clean.phrases)


def verify_object(
    client: GroundingClient,
    image_ref: str,
    phrase: str,
    threshold: float = DEFAULT_THRESHOLD,
) -> GroundingVerdict:
    """Query the grounding service with the phrase's head noun.

    detected requires a confidence strictly above the threshold, so a
    box at exactly the threshold does not count.
    """
    query = GroundingQuery(image_ref=image_ref, phrase=phrase, threshold=threshold)
    boxes = tuple(client.locate(query.image_ref, head_noun(query.phrase)))
    max_confidence = max((b.confidence for b in boxes), default=0.0)
    return GroundingVerdict(
        phrase=phrase,
        detected=max_confidence > query.threshold,
        max_confidence=max_confidence,
        boxes=boxes,
    )


def verify_candidates(
    client: GroundingClient,
    image_ref: str,
    phrases: Iterable[str],
    threshold: float = DEFAULT_THRESHOLD,
    concurrency: int = DEFAULT_CONCURRENCY,
) -> dict[str, GroundingVerdict | None]:
    """Bounded-concurrency fan-out of verify_object over candidates.

    Results are keyed by phrase (None marks a service failure), so the
    aggregate is independent of completion order.
    """
    ordered = sorted(set(phrases))
    results: dict[str, GroundingVerdict | None] = {}

    def one(phrase: str):
        try:
            return phrase, verify_object(client, image_ref, phrase, threshold)
        except GroundingServiceError:
            return phrase, None

    if not ordered:
        return results
    with ThreadPoolExecutor(max_workers=max(1, int(concurrency))) as pool:
        for phrase, verdict in pool.map(one, ordered):
            results[phrase] = verdict
    return {phrase: results[phrase] for phrase in ordered}


def grounded_hallucination_rate(
    verdicts: Iterable[GroundingVerdict | None], adv_object_count: int
) -> float:
    """Fraction of adversarial-caption objects that are new and could not
    be grounded. An empty adversarial object set yields 0 (callers flag
    the degenerate case); a missing verdict aborts the aggregate.
    """
    verdicts = list(verdicts)
    if any(v is None for v in verdicts):
        raise UnverifiableError(
            "at least one grounding verdict is missing; refusing a partial rate"
        )
    if adv_object_count == 0:
        return 0.0
    ungrounded = sum(1 for v in verdicts if not v.detected)
    return ungrounded / adv_object_count


# --------------------------------------------------------------- stub server

class _StubHandler(BaseHTTPRequestHandler):
    table: Mapping[str, list] = {}

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        try:
            request = json.loads(self.rfile.read(length) or b"{}")
            phrase = request["phrase"]
        except (json.JSONDecodeError, KeyError):
            self.send_response(400)
            self.end_headers()
            return
        detections = self.table.get(phrase, [])
        body = json.dumps({"detections": detections}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        pass


class StubGroundingService:
    """Local HTTP grounding service backed by a fixture table.

    The table maps query phrases (head nouns) to raw detection dicts
    ({"box": [...], "confidence": f}) and is served verbatim, so tests
    and offline runs exercise the real HTTP client path.
    """

    def __init__(self, table: Mapping[str, list] | str, host: str = "127.0.0.1", port: int = 0):
        if isinstance(table, (str, bytes)) or hasattr(table, "__fspath__"):
            with open(table, encoding="utf-8") as fh:
                table = json.load(fh)
        handler = type("Handler", (_StubHandler,), {"table": dict(table)})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/ground"

    def start(self) -> str:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self.endpoint

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "StubGroundingService":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
