"""Deterministic scenes, manifests, and canonical fixtures shared by the
test suite and the regression-fixture generator.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from bcr import ImageTensor, RoiSpec, default_config, save_image, toy_encoder, validate_image

FIXTURE_DIR = Path(__file__).parent / "fixtures"

# The canonical regression setup: seed-7 default toy encoder (depth 4,
# dim 32, patch 2, 16x16) attacking a 4-patch ROI of a structured scene.
SEED7_ROI = RoiSpec([(4, 4, 8, 8)])


def toy_scene(resolution: int = 16) -> ImageTensor:
    """Structured scene: linear color ramps plus a flat distinct block
    inside the canonical ROI. Adjacent-pixel differences are either
    exactly zero or comfortably larger than finite-difference steps,
    which keeps the total-variation term away from its kinks.
    """
    n = resolution
    yy, xx = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    img = np.stack([
        0.25 + 0.4 * xx,
        0.30 + 0.3 * yy,
        0.15 + 0.35 * xx + 0.25 * yy,
    ])
    lo, hi = n // 4, n // 2
    img[0, lo:hi, lo:hi] = 0.90
    img[1, lo:hi, lo:hi] = 0.15
    img[2, lo:hi, lo:hi] = 0.10
    return validate_image(img)


def random_image(seed: int, resolution: int = 16) -> ImageTensor:
    rng = np.random.default_rng(seed)
    return validate_image(rng.uniform(0.0, 1.0, size=(3, resolution, resolution)))


def seed7_fixture():
    """(encoder, image, roi, config) of the canonical regression run."""
    return toy_encoder(7), toy_scene(16), SEED7_ROI, default_config()


# --------------------------------------------------------------- manifests

EVAL_CAPTIONS = [
    # (clean, adversarial); object vocabulary below.
    ("a dog next to a tree", "a tree in a park"),
    ("a dog next to a tree", "a tree and a bench"),
    ("a dog next to a tree", "a dog and a tree"),
]
EVAL_TARGET = "dog"
EVAL_LEXICON = ["dog", "tree", "bench", "park"]

# Grounding fixture keyed by head-noun query. "park" sits exactly at the
# default threshold, so it must NOT count as detected.
GROUNDING_TABLE = {
    "tree": [{"box": [0.0, 0.0, 4.0, 4.0], "confidence": 0.8}],
    "park": [{"box": [0.0, 0.0, 4.0, 4.0], "confidence": 0.3}],
    "bench": [],
}


def eval_scene(index: int, resolution: int = 16) -> ImageTensor:
    """Per-item deterministic scene for the toy evaluation manifest."""
    rng = np.random.default_rng(1000 + index)
    n = resolution
    yy, xx = np.meshgrid(np.linspace(0, 0.25, n), np.linspace(0, 0.25, n), indexing="ij")
    base = rng.uniform(0.25, 0.65, size=(3, 1, 1)) * np.ones((3, n, n))
    img = np.clip(base + np.stack([xx, yy, xx + yy]), 0.0, 1.0)
    img[:, n // 4: n // 2, n // 4: n // 2] = rng.uniform(0.05, 0.95, size=(3, 1, 1))
    return validate_image(img)


def write_eval_manifest(directory: Path, with_captions: bool = True) -> Path:
    """Materialize the 3-item toy manifest (images, lexicon, manifest)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (clean, adv) in enumerate(EVAL_CAPTIONS):
        save_image(eval_scene(i), directory / f"scene{i}.png")
        item = {
            "image_path": f"scene{i}.png",
            "roi": [[4, 4, 4, 4]],
            "target_object": EVAL_TARGET,
        }
        if with_captions:
            item["clean_caption"] = clean
            item["adversarial_caption"] = adv
        items.append(item)
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(
        {"name": "toy-eval", "split": "test", "items": items}, indent=2
    ))
    (directory / "lexicon.txt").write_text("\n".join(EVAL_LEXICON) + "\n")
    (directory / "grounding.json").write_text(json.dumps(GROUNDING_TABLE, indent=2))
    return manifest_path
