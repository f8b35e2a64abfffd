"""Batch evaluation and a layer-sensitivity sweep, library-first.

Builds a small manifest on disk (three synthetic scenes with fixture
captions), attacks every item, aggregates the metric table, and then
repeats the batch for two layer groups to compare where in the encoder
the alignment bites. Everything lands under ./demo_runs/.

The same flows are available from the CLI:

    bcr eval  --manifest M --encoder toy --out DIR --lexicon L
    bcr sweep --manifest M --encoder toy --groups "early=1,2;late=3,4" --out DIR

Run: python3 demos/06_batch_eval_and_sweep.py
"""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from bcr import (
    LexiconExtractor,
    StubGroundingService,
    default_config,
    emit_plots,
    load_manifest,
    run_attack_batch,
    run_layer_sweep,
    save_image,
    validate_image,
)

root = Path("demo_runs")
data = root / "data"
data.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(42)
captions = [
    ("a dog next to a tree", "a tree in a park"),
    ("a dog next to a tree", "a tree and a bench"),
    ("a dog next to a tree", "a dog and a tree"),
]
items = []
for i, (clean_cap, adv_cap) in enumerate(captions):
    img = np.clip(rng.uniform(0.2, 0.7, size=(3, 1, 1))
                  + 0.2 * rng.uniform(size=(3, 16, 16)), 0, 1)
    img[:, 4:8, 4:8] = rng.uniform(size=(3, 1, 1))
    save_image(validate_image(img), data / f"scene{i}.png")
    items.append({
        "image_path": f"scene{i}.png",
        "roi": [[4, 4, 4, 4]],
        "target_object": "dog",
        "clean_caption": clean_cap,
        "adversarial_caption": adv_cap,
    })
(data / "manifest.json").write_text(json.dumps(
    {"name": "demo", "split": "toy", "items": items}, indent=2))

manifest = load_manifest(data / "manifest.json")
config = replace(default_config(), steps=40)
extractor = LexiconExtractor(["dog", "tree", "bench", "park"])
grounding_table = {
    "tree": [{"box": [0, 0, 4, 4], "confidence": 0.8}],
    "park": [{"box": [0, 0, 4, 4], "confidence": 0.3}],
    "bench": [],
}

with StubGroundingService(grounding_table) as stub:
    report = run_attack_batch(
        manifest, "toy", config, root / "eval",
        encoder_options={"seed": 7},
        extractor=extractor,
        grounding_endpoint=stub.endpoint,
    )

print("aggregate metrics over the batch:")
for key, value in report.aggregates.items():
    print(f"  {key:<8} {'n/a' if value is None else round(value, 4)}")
print(f"({len(report.items)} items, {len(report.failures)} failures)")

plots = emit_plots(report, root / "eval" / "plots")
print(f"\nwrote {len(plots)} plot file(s) under {root / 'eval' / 'plots'}")

sweep = run_layer_sweep(
    manifest, "toy", config,
    {"early": [1, 2], "late": [3, 4]}, root / "sweep",
    encoder_options={"seed": 7},
    extractor=extractor,
)
print("\nlayer-sensitivity sweep:")
print(sweep["table"], end="")
means = {name: float(np.mean(entry["final_losses"]))
         for name, entry in sweep["groups"].items()}
print(f"\nmean final objective per group: {means}")
print(f"reports under {root}/")
