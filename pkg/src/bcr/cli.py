"""Command-line interface.

Three subcommands cover the workflow:

    bcr attack --image scene.png --roi "16,16,32,32" --encoder toy --out run/
    bcr eval   --manifest set.json --encoder toy --out run/ [--grounding-endpoint URL]
    bcr sweep  --manifest set.json --encoder toy --groups "early=1,2;late=3,4" --out run/

Attack settings come from defaults, overridden by an optional config
file (JSON or key=value lines), overridden by explicit flags. The
grounding endpoint falls back to the GROUNDING_ENDPOINT environment
variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .core import AttackConfig, RoiSpec
from .attack import run_bcr_attack
from .encoder import create_encoder
from .errors import BcrError, ParseError
from .experiment import (
    emit_plots,
    load_image,
    load_manifest,
    run_attack_batch,
    run_layer_sweep,
    save_image,
    write_report,
)
from .metrics import LexiconExtractor

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(AttackConfig)}


def _parse_value(name: str, raw: str):
    if name == "layers":
        return frozenset(int(v) for v in str(raw).replace(",", " ").split())
    if name in ("steps",):
        return int(raw)
    if name in ("similarity_mode", "step_rule"):
        return str(raw)
    if name in ("roi_only_perturbation", "tv_on_full_image"):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes", "on")
    return float(raw)


def load_config_file(path) -> dict:
    """Read attack settings from JSON or key=value lines."""
    text = Path(path).read_text(encoding="utf-8").strip()
    values: dict = {}
    if text.startswith("{"):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config file {path} is not valid JSON: {exc}") from exc
    else:
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    overrides = {}
    for key, value in values.items():
        if key not in _CONFIG_FIELDS:
            raise ParseError(f"unknown config key {key!r} in {path}")
        overrides[key] = _parse_value(key, value)
    return overrides


def _build_config(args, encoder) -> AttackConfig:
    overrides: dict = {}
    if getattr(args, "config", None):
        overrides.update(load_config_file(args.config))
    flag_map = {
        "epsilon": "epsilon",
        "step_size": "step_size",
        "steps": "steps",
        "layers": "layers",
        "lambda_stat": "lambda_stat",
        "lambda_dict": "lambda_dict",
        "lambda_pres": "lambda_pres",
        "lambda_tv": "lambda_tv",
        "tau": "tau",
        "similarity_mode": "similarity_mode",
        "step_rule": "step_rule",
    }
    for attr, field in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field] = (
                _parse_value(field, value) if field == "layers" else value
            )
    if getattr(args, "roi_only_perturbation", False):
        overrides["roi_only_perturbation"] = True
    if getattr(args, "tv_full_image", False):
        overrides["tv_on_full_image"] = True
    if "layers" not in overrides:
        depth = encoder.descriptor.depth
        overrides["layers"] = frozenset(range(max(1, depth - 3), depth + 1))
    return AttackConfig(**overrides)


def _encoder_options(pairs) -> dict:
    options = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ParseError(f"--encoder-option expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        try:
            options[key] = int(value)
        except ValueError:
            try:
                options[key] = float(value)
            except ValueError:
                options[key] = value
    return options


def _parse_roi(values) -> RoiSpec:
    corners = []
    for value in values:
        parts = [int(v) for v in value.replace(",", " ").split()]
        if len(parts) != 4 or parts[2] <= 0 or parts[3] <= 0:
            raise ParseError(f"--roi expects 'x,y,w,h' with positive size, got {value!r}")
        x, y, w, h = parts
        corners.append((x, y, x + w, y + h))
    return RoiSpec(corners)


def _parse_groups(spec: str) -> dict[str, list[int]]:
    groups = {}
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ParseError(f"--groups expects 'name=l1,l2;...', got {chunk!r}")
        name, _, layers = chunk.partition("=")
        groups[name.strip()] = [int(v) for v in layers.replace(",", " ").split()]
    if not groups:
        raise ParseError("--groups produced no layer groups")
    return groups


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or key=value attack-config file")
    parser.add_argument("--epsilon", type=float, help="l-inf pixel budget")
    parser.add_argument("--step-size", dest="step_size", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--layers", help="comma-separated encoder block indices")
    parser.add_argument("--lambda-stat", dest="lambda_stat", type=float)
    parser.add_argument("--lambda-dict", dest="lambda_dict", type=float)
    parser.add_argument("--lambda-pres", dest="lambda_pres", type=float)
    parser.add_argument("--lambda-tv", dest="lambda_tv", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--similarity-mode", dest="similarity_mode",
                        choices=["cosine", "raw-dot"])
    parser.add_argument("--step-rule", dest="step_rule",
                        choices=["signed-gradient", "plain-gradient"])
    parser.add_argument("--roi-only-perturbation", action="store_true")
    parser.add_argument("--tv-full-image", action="store_true")
    parser.add_argument("--encoder", required=True, help="registered encoder adapter")
    parser.add_argument("--encoder-option", action="append", metavar="KEY=VALUE",
                        help="adapter-specific option, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bcr",
        description="Conceal objects from vision encoders by background-consistent re-encoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="attack a single image")
    p_attack.add_argument("--image", required=True)
    p_attack.add_argument("--roi", action="append", required=True,
                          metavar="X,Y,W,H", help="ROI box, repeatable")
    p_attack.add_argument("--target", help="name of the object being concealed")
    p_attack.add_argument("--out", required=True)
    _add_config_flags(p_attack)

    p_eval = sub.add_parser("eval", help="attack and evaluate a manifest of images")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--grounding-endpoint",
                        default=os.environ.get("GROUNDING_ENDPOINT") or None)
    p_eval.add_argument("--grounding-threshold", type=float, default=0.3)
    p_eval.add_argument("--lexicon", help="newline-separated object vocabulary file")
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--plots", action="store_true", help="emit loss/metric plots")
    _add_config_flags(p_eval)

    p_sweep = sub.add_parser("sweep", help="layer-sensitivity sweep over a manifest")
    p_sweep.add_argument("--manifest", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--groups", help="e.g. 'early=1,2;late=3,4' (default: depth-based)")
    p_sweep.add_argument("--lexicon")
    p_sweep.add_argument("--grounding-endpoint",
                         default=os.environ.get("GROUNDING_ENDPOINT") or None)
    p_sweep.add_argument("--workers", type=int, default=1)
    _add_config_flags(p_sweep)
    return parser


def _cmd_attack(args) -> int:
    encoder = create_encoder(args.encoder, **_encoder_options(args.encoder_option))
    config = _build_config(args, encoder)
    image = load_image(args.image)
    roi = _parse_roi(args.roi)
    result = run_bcr_attack(encoder, image, roi, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.adversarial_image, out / "adversarial.png")
    payload = {
        "config": config.to_dict(),
        "encoder": result.metadata.get("encoder", {}),
        "target_object": args.target,
        "converged_linf": result.converged_linf,
        "loss_trace": {
            "total": [b.total for b in result.loss_trace],
            "stat": [b.stat for b in result.loss_trace],
            "dict": [b.dict for b in result.loss_trace],
            "pres": [b.pres for b in result.loss_trace],
            "tv": [b.tv for b in result.loss_trace],
        },
    }
    write_report(payload, out / "result.json")
    final = result.loss_trace[-1].total if result.loss_trace else float("nan")
    print(f"adversarial image written to {out / 'adversarial.png'}")
    print(f"final objective {final:.6f}, realized l-inf {result.converged_linf:.4f}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    encoder_options = _encoder_options(args.encoder_option)
    encoder = create_encoder(args.encoder, **encoder_options)
    config = _build_config(args, encoder)
    extractor = (
        LexiconExtractor.from_file(args.lexicon) if args.lexicon else None
    )
    report = run_attack_batch(
        manifest,
        args.encoder,
        config,
        args.out,
        encoder_options=encoder_options,
        extractor=extractor,
        grounding_endpoint=args.grounding_endpoint,
        grounding_threshold=args.grounding_threshold,
        workers=args.workers,
    )
    if args.plots:
        emit_plots(report, Path(args.out) / "plots")
    print(f"report written to {Path(args.out) / 'report.json'}")
    for key, value in report.aggregates.items():
        print(f"  {key}: {'n/a' if value is None else f'{value:.4f}'}")
    if report.failures:
        print(f"  {len(report.failures)} item(s) failed and were skipped")
    return 0


def _cmd_sweep(args) -> int:
    manifest = load_manifest(args.manifest)
    encoder_options = _encoder_options(args.encoder_option)
    encoder = create_encoder(args.encoder, **encoder_options)
    config = _build_config(args, encoder)
    groups = _parse_groups(args.groups) if args.groups else None
    extractor = (
        LexiconExtractor.from_file(args.lexicon) if args.lexicon else None
    )
    sweep = run_layer_sweep(
        manifest,
        args.encoder,
        config,
        groups,
        args.out,
        encoder_options=encoder_options,
        extractor=extractor,
        grounding_endpoint=args.grounding_endpoint,
        workers=args.workers,
    )
    print(f"sweep report written to {Path(args.out) / 'sweep_report.json'}")
    print(sweep["table"], end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "attack":
            return _cmd_attack(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        raise AssertionError(f"unhandled command {args.command}")
    except BcrError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
