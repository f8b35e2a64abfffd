"""Dataset ingestion, batch attack execution, metric aggregation,
layer-sensitivity sweeps, and report/plot persistence.

A manifest is a JSON document:

    {
      "name": "toy-set", "split": "test",
      "items": [
        {"image_path": "scene0.png",
         "roi": [[x, y, w, h], ...],
         "target_object": "dog",
         "clean_caption": "...",          # optional
         "adversarial_caption": "..."}    # optional
      ]
    }

Boxes use the COCO (x, y, width, height) convention and are converted
to corner form internally; relative image paths resolve against the
manifest's directory. Adversarial images are persisted as lossless
8-bit PNG, so downstream budget checks get a 2/255 quantization
allowance on top of epsilon.

Reports are plain JSON with per-item metrics, aggregate means over the
non-flagged values, a config snapshot, and the tool version; aggregate
keys follow the C / GP / GH / SD abbreviations plus SSIM and the
LPIPS slot. Everything except the `generated_at` field is
deterministic for a fixed manifest, seed, and config.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from . import __version__
from .attack import run_bcr_attack
from .core import AttackConfig, ImageTensor, RoiSpec, validate_image
from .encoder import create_encoder
from .errors import (
    BcrError,
    BoundsError,
    EmptyDatasetError,
    ExtractorUnavailable,
    InvalidBoxError,
    LayerOutOfRange,
    MissingImageError,
    ParseError,
    UndefinedMetricError,
    UnverifiableError,
)
from .grounding import (
    DEFAULT_CONCURRENCY,
    DEFAULT_THRESHOLD,
    HttpGroundingClient,
    candidate_hallucinations,
    grounded_hallucination_rate,
    verify_candidates,
)
from .metrics import (
    MetricsReport,
    ObjectExtractor,
    concealment_success,
    extract_objects,
    get_embedder,
    get_perceptual_backend,
    global_preservation,
    perceptual_distance,
    semantic_drift,
    ssim,
)

AGGREGATE_KEYS = ("C", "GP", "GH", "GH_head", "SD", "SSIM", "LPIPS")


# ------------------------------------------------------------------ image IO

def load_image(path) -> ImageTensor:
    """Read an RGB image file into the canonical [0, 1] tensor."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return validate_image(data.transpose(2, 0, 1))


def save_image(image: ImageTensor, path) -> None:
    """Write a canonical tensor as lossless 8-bit PNG."""
    quantized = np.rint(image.data * 255.0).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class ManifestItem:
    image_path: str
    resolved_path: str
    roi: RoiSpec
    target_object: str | None = None
    clean_caption: str | None = None
    adversarial_caption: str | None = None

    @property
    def has_captions(self) -> bool:
        return self.clean_caption is not None and self.adversarial_caption is not None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    items: tuple[ManifestItem, ...]

    def __len__(self) -> int:
        return len(self.items)


def _corner_roi(boxes) -> RoiSpec:
    corners = []
    for b in boxes:
        if len(b) != 4:
            raise InvalidBoxError(f"box {b!r} must have 4 entries (x, y, w, h)")
        x, y, w, h = (int(v) for v in b)
        if w <= 0 or h <= 0:
            raise InvalidBoxError(f"box {b!r} has non-positive width or height")
        if x < 0 or y < 0:
            raise InvalidBoxError(f"box {b!r} has negative origin")
        corners.append((x, y, x + w, y + h))
    try:
        return RoiSpec(corners)
    except BoundsError as exc:
        raise InvalidBoxError(str(exc)) from exc


def load_manifest(path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Raises ParseError on malformed JSON/schema, MissingImageError when a
    referenced image does not exist, and InvalidBoxError for degenerate
    boxes.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(payload, dict) or "items" not in payload:
        raise ParseError(f"manifest {path} lacks an 'items' list")

    items = []
    for i, raw in enumerate(payload["items"]):
        try:
            image_path = raw["image_path"]
            boxes = raw["roi"]
        except (TypeError, KeyError) as exc:
            raise ParseError(f"item {i} missing required field: {exc}") from exc
        if not boxes:
            raise InvalidBoxError(f"item {i} has no ROI boxes")
        resolved = Path(image_path)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        if not resolved.is_file():
            raise MissingImageError(f"item {i}: image not found at {resolved}")
        items.append(ManifestItem(
            image_path=str(image_path),
            resolved_path=str(resolved),
            roi=_corner_roi(boxes),
            target_object=raw.get("target_object"),
            clean_caption=raw.get("clean_caption"),
            adversarial_caption=raw.get("adversarial_caption"),
        ))
    return DatasetManifest(
        name=str(payload.get("name", path.stem)),
        split=str(payload.get("split", "")),
        items=tuple(items),
    )


# ------------------------------------------------------------------- batches

@dataclass(frozen=True)
class ExperimentReport:
    version: str
    manifest_name: str
    split: str
    encoder: dict
    config: dict
    items: tuple[dict, ...]
    aggregates: dict
    failures: tuple[dict, ...]
    generated_at: str

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "manifest_name": self.manifest_name,
            "split": self.split,
            "encoder": self.encoder,
            "config": self.config,
            "items": list(self.items),
            "aggregates": self.aggregates,
            "failures": list(self.failures),
            "generated_at": self.generated_at,
        }


def write_report(report: ExperimentReport | dict, path) -> None:
    """Serialize a report as stable, sorted JSON."""
    payload = report.to_dict() if isinstance(report, ExperimentReport) else report
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _metric_excluded(key: str, flags: Iterable[str]) -> bool:
    prefix = key + ":"
    return any(f.startswith(prefix) for f in flags)


def _aggregate(items: Iterable[dict]) -> dict:
    sums: dict[str, list[float]] = {k: [] for k in AGGREGATE_KEYS}
    for item in items:
        metrics = item["metrics"]
        flags = metrics.get("flags", [])
        for key in AGGREGATE_KEYS:
            value = metrics.get(key)
            if value is None or _metric_excluded(key, flags):
                continue
            sums[key].append(float(value))
    return {
        k: (float(np.mean(v)) if v else None) for k, v in sums.items()
    }


def _trace_dict(result) -> dict:
    return {
        "total": [b.total for b in result.loss_trace],
        "stat": [b.stat for b in result.loss_trace],
        "dict": [b.dict for b in result.loss_trace],
        "pres": [b.pres for b in result.loss_trace],
        "tv": [b.tv for b in result.loss_trace],
    }


def _caption_metrics(item, extractor, embedder, grounding):
    """Caption-level metric values plus metric-scoped flags."""
    flags: list[str] = []
    o_clean = extract_objects(item.clean_caption, extractor)
    o_adv = extract_objects(item.adversarial_caption, extractor)

    concealment = None
    if item.target_object is not None:
        concealment = concealment_success(item.target_object, o_clean, o_adv)

    try:
        preservation = global_preservation(o_clean, o_adv)
    except UndefinedMetricError:
        preservation = None
        flags.append("GP:undefined-empty-clean-set")

    drift = semantic_drift(item.clean_caption, item.adversarial_caption, embedder)

    gh = gh_head = None
    if grounding is not None:
        client, image_ref, threshold, concurrency = grounding
        gh, gh_flags = _grounded_rate(
            client, image_ref,
            candidate_hallucinations(o_clean, o_adv), len(o_adv.phrases),
            threshold, concurrency, "GH",
        )
        gh_head, head_flags = _grounded_rate(
            client, image_ref,
            o_adv.head_nouns - o_clean.head_nouns, len(o_adv.head_nouns),
            threshold, concurrency, "GH_head",
        )
        flags.extend(gh_flags)
        flags.extend(head_flags)
    return {
        "concealment": concealment,
        "global_preservation": preservation,
        "semantic_drift": drift,
        "grounded_hallucination": gh,
        "head_noun_hallucination": gh_head,
    }, flags


def _grounded_rate(client, image_ref, candidates, denominator, threshold,
                   concurrency, key):
    flags = []
    verdicts = verify_candidates(
        client, image_ref, candidates,
        threshold=threshold, concurrency=concurrency,
    )
    try:
        rate = grounded_hallucination_rate(verdicts.values(), denominator)
    except UnverifiableError:
        return None, [f"{key}:unverifiable-service-failure"]
    if denominator == 0:
        flags.append(f"{key}:degenerate-empty-adv-set")
    return rate, flags


def run_attack_batch(
    manifest: DatasetManifest,
    encoder_name: str,
    config: AttackConfig,
    output_dir,
    *,
    encoder_options: Mapping | None = None,
    extractor: ObjectExtractor | None = None,
    embedder="hashed-bow",
    perceptual_backend="pixel-l2",
    grounding_endpoint: str | None = None,
    grounding_threshold: float = DEFAULT_THRESHOLD,
    grounding_concurrency: int = DEFAULT_CONCURRENCY,
    workers: int = 1,
) -> ExperimentReport:
    """Attack every manifest item and assemble the experiment report.

    Per-item failures are recorded under `failures` and skipped in the
    aggregates; they never abort the batch. Adversarial images land in
    <output_dir>/images/ and are referenced by relative path.
    """
    if len(manifest) == 0:
        raise EmptyDatasetError(f"manifest {manifest.name!r} has no items")
    needs_captions = any(item.has_captions for item in manifest.items)
    if needs_captions and extractor is None:
        raise ExtractorUnavailable(
            "manifest provides captions; pass an object extractor (e.g. a lexicon)"
        )
    if isinstance(embedder, str):
        embedder = get_embedder(embedder)
    if isinstance(perceptual_backend, str):
        perceptual_backend = get_perceptual_backend(perceptual_backend)

    output_dir = Path(output_dir)
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    encoder = create_encoder(encoder_name, **dict(encoder_options or {}))
    client = (
        HttpGroundingClient(grounding_endpoint) if grounding_endpoint else None
    )
    encoder_lock = threading.Lock()
    serialize = not getattr(encoder, "reentrant", True)

    def process(index_item):
        index, item = index_item
        image = load_image(item.resolved_path)
        if serialize:
            with encoder_lock:
                result = run_bcr_attack(encoder, image, item.roi, config)
        else:
            result = run_bcr_attack(encoder, image, item.roi, config)
        adv_rel = f"images/item_{index:03d}_adv.png"
        save_image(result.adversarial_image, output_dir / adv_rel)

        flags: list[str] = []
        values = {
            "ssim": ssim(image, result.adversarial_image),
            "perceptual_distance": perceptual_distance(
                image, result.adversarial_image, perceptual_backend
            ),
        }
        if item.has_captions:
            grounding = (
                (client, adv_rel, grounding_threshold, grounding_concurrency)
                if client is not None else None
            )
            caption_values, caption_flags = _caption_metrics(
                item, extractor, embedder, grounding
            )
            values.update(caption_values)
            flags.extend(caption_flags)
        metrics = MetricsReport(flags=tuple(flags), **values)
        return {
            "index": index,
            "image_path": item.image_path,
            "target_object": item.target_object,
            "adversarial_image": adv_rel,
            "attack": {
                "converged_linf": result.converged_linf,
                "steps": len(result.loss_trace),
                "final_total_loss": (
                    result.loss_trace[-1].total if result.loss_trace else None
                ),
            },
            "loss_trace": _trace_dict(result),
            "metrics": metrics.to_dict(),
        }

    indexed = list(enumerate(manifest.items))
    results: dict[int, dict] = {}
    failures: dict[int, dict] = {}

    def run_one(pair):
        index, item = pair
        try:
            results[index] = process(pair)
        except BcrError as exc:
            failures[index] = {
                "index": index,
                "image_path": item.image_path,
                "error": type(exc).__name__,
                "message": str(exc),
            }

    effective_workers = 1 if serialize else max(1, int(workers))
    if effective_workers == 1:
        for pair in indexed:
            run_one(pair)
    else:
        with ThreadPoolExecutor(max_workers=effective_workers) as pool:
            list(pool.map(run_one, indexed))

    items = tuple(results[i] for i in sorted(results))
    report = ExperimentReport(
        version=__version__,
        manifest_name=manifest.name,
        split=manifest.split,
        encoder=dict(getattr(encoder, "metadata", {"identifier": encoder_name})),
        config=config.to_dict(),
        items=items,
        aggregates=_aggregate(items),
        failures=tuple(failures[i] for i in sorted(failures)),
        generated_at=datetime.now(timezone.utc).isoformat(),
    )
    write_report(report, output_dir / "report.json")
    return report


# -------------------------------------------------------------------- sweeps

def default_layer_groups(depth: int) -> dict[str, list[int]]:
    """Early / middle / late block groups: the first four blocks, the
    centered span between them, and the last four blocks. Degenerate or
    duplicate groups collapse for shallow encoders.
    """
    early = list(range(1, min(4, depth) + 1))
    late = list(range(max(1, depth - 3), depth + 1))
    groups = {"early": early, "late": late}
    if late[0] > early[-1] + 1:
        groups["middle"] = list(range(early[-1] + 1, late[0]))
    if late == early:
        groups = {"early": early}
    return groups


def run_layer_sweep(
    manifest: DatasetManifest,
    encoder_name: str,
    config: AttackConfig,
    groups: Mapping[str, Iterable[int]] | None,
    output_dir,
    *,
    encoder_options: Mapping | None = None,
    **batch_kwargs,
) -> dict:
    """Run the batch once per layer group and tabulate the results.

    Each group's batch lands in <output_dir>/<group>/; the sweep report
    (JSON plus a rendered text table with Targeted Layers, Concealment
    Success, and Hallucination Rate columns) lands in output_dir.
    """
    encoder = create_encoder(encoder_name, **dict(encoder_options or {}))
    depth = encoder.descriptor.depth
    if groups is None:
        groups = default_layer_groups(depth)
    resolved: dict[str, list[int]] = {}
    for name in sorted(groups):
        layer_list = sorted(int(l) for l in groups[name])
        if not layer_list:
            raise LayerOutOfRange(f"group {name!r} has no layers")
        for l in layer_list:
            if l < 1 or l > depth:
                raise LayerOutOfRange(
                    f"group {name!r} layer {l} outside 1..{depth}"
                )
        resolved[name] = layer_list

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    group_entries: dict[str, dict] = {}
    for name, layer_list in resolved.items():
        report = run_attack_batch(
            manifest,
            encoder_name,
            config.with_layers(layer_list),
            output_dir / name,
            encoder_options=encoder_options,
            **batch_kwargs,
        )
        final_losses = [
            item["attack"]["final_total_loss"] for item in report.items
        ]
        group_entries[name] = {
            "layers": layer_list,
            "aggregates": report.aggregates,
            "final_losses": final_losses,
        }

    table = _sweep_table(group_entries)
    sweep = {
        "version": __version__,
        "manifest_name": manifest.name,
        "encoder": dict(getattr(encoder, "metadata", {"identifier": encoder_name})),
        "config": config.to_dict(),
        "groups": group_entries,
        "table": table,
    }
    write_report(sweep, output_dir / "sweep_report.json")
    (output_dir / "sweep_table.txt").write_text(table, encoding="utf-8")
    return sweep


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def _sweep_table(group_entries: Mapping[str, dict]) -> str:
    header = ("Targeted Layers", "Concealment Success", "Hallucination Rate")
    rows = [header]
    for name in sorted(group_entries):
        entry = group_entries[name]
        layers = ",".join(str(l) for l in entry["layers"])
        rows.append((
            f"{name} ({layers})",
            _fmt(entry["aggregates"].get("C")),
            _fmt(entry["aggregates"].get("GH")),
        ))
    widths = [max(len(r[c]) for r in rows) for c in range(3)]
    lines = ["  ".join(r[c].ljust(widths[c]) for c in range(3)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- plots

def emit_plots(report: ExperimentReport | dict, directory) -> list[str]:
    """Emit per-item loss-vs-step curves and an aggregate metric bar chart.

    Returns the list of written files; an empty report produces no files
    (with a notice) and still succeeds.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    payload = report.to_dict() if isinstance(report, ExperimentReport) else report
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    plottable = [
        item for item in payload.get("items", [])
        if item.get("loss_trace", {}).get("total")
    ]
    if not plottable and not any(
        v is not None for v in payload.get("aggregates", {}).values()
    ):
        print("emit_plots: nothing to plot")
        return written

    for item in plottable:
        trace = item["loss_trace"]
        steps = np.arange(1, len(trace["total"]) + 1)
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("total", "stat", "dict", "pres", "tv"):
            ax.plot(steps, trace[key], label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(f"item {item['index']}: objective per step")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = directory / f"loss_item_{item['index']:03d}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(str(out))

    aggregates = {
        k: v for k, v in payload.get("aggregates", {}).items() if v is not None
    }
    if aggregates:
        fig, ax = plt.subplots(figsize=(6, 4))
        keys = [k for k in AGGREGATE_KEYS if k in aggregates]
        ax.bar(keys, [aggregates[k] for k in keys], color="#2980b9")
        ax.set_ylabel("mean value")
        ax.set_title("aggregate metrics")
        fig.tight_layout()
        out = directory / "aggregates.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(str(out))
    return written
