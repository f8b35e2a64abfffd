import json
from dataclasses import replace

import numpy as np
import pytest

import helpers
from bcr import default_config, load_image, load_manifest, run_attack_batch, save_image
from bcr.cli import load_config_file, main
from bcr.errors import (
    EmptyDatasetError,
    ExtractorUnavailable,
    InvalidBoxError,
    LayerOutOfRange,
    MissingImageError,
    ParseError,
)
from bcr.experiment import (
    default_layer_groups,
    emit_plots,
    read_report,
    run_layer_sweep,
    write_report,
)
from bcr.metrics import LexiconExtractor

def fast_config():
    return replace(default_config(), steps=5)


def write_manifest(tmp_path, items, name="t"):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"name": name, "split": "test", "items": items}))
    return path


class TestImageIo:
    def test_png_round_trip_quantization(self, tmp_path):
        image = helpers.random_image(0, 16)
        save_image(image, tmp_path / "x.png")
        again = load_image(tmp_path / "x.png")
        assert np.abs(again.data - image.data).max() <= 1 / 510 + 1e-12


class TestLoadManifest:
    def test_single_item_round_trip(self, tmp_path):
        save_image(helpers.eval_scene(0), tmp_path / "img.png")
        path = write_manifest(tmp_path, [
            {"image_path": "img.png", "roi": [[1, 1, 4, 4]], "target_object": "dog"}
        ])
        manifest = load_manifest(path)
        assert len(manifest) == 1
        assert manifest.items[0].roi.boxes == ((1, 1, 5, 5),)
        assert manifest.items[0].target_object == "dog"

    def test_zero_width_box_rejected(self, tmp_path):
        save_image(helpers.eval_scene(0), tmp_path / "img.png")
        path = write_manifest(tmp_path, [
            {"image_path": "img.png", "roi": [[1, 1, 0, 4]]}
        ])
        with pytest.raises(InvalidBoxError):
            load_manifest(path)

    def test_missing_image_names_path(self, tmp_path):
        path = write_manifest(tmp_path, [
            {"image_path": "absent.png", "roi": [[1, 1, 2, 2]]}
        ])
        with pytest.raises(MissingImageError, match="absent.png"):
            load_manifest(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_missing_items_key(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"name": "x"}))
        with pytest.raises(ParseError):
            load_manifest(path)


class TestRunAttackBatch:
    def test_two_item_aggregate_is_mean(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        manifest = type(manifest)(name=manifest.name, split=manifest.split,
                                  items=manifest.items[:2])
        report = run_attack_batch(
            manifest, "toy", fast_config(), tmp_path / "out",
            encoder_options={"seed": 7},
            extractor=LexiconExtractor(helpers.EVAL_LEXICON))
        assert len(report.items) == 2
        values = [item["metrics"]["SSIM"] for item in report.items]
        assert report.aggregates["SSIM"] == pytest.approx(np.mean(values))
        values = [item["metrics"]["GP"] for item in report.items]
        assert report.aggregates["GP"] == pytest.approx(np.mean(values))

    def test_empty_background_item_skipped(self, tmp_path):
        data_dir = tmp_path / "d"
        data_dir.mkdir()
        save_image(helpers.eval_scene(0), data_dir / "a.png")
        save_image(helpers.eval_scene(1), data_dir / "b.png")
        path = write_manifest(data_dir, [
            {"image_path": "a.png", "roi": [[0, 0, 16, 16]]},
            {"image_path": "b.png", "roi": [[4, 4, 4, 4]]},
        ])
        report = run_attack_batch(load_manifest(path), "toy", fast_config(),
                                  tmp_path / "out")
        assert len(report.items) == 1
        assert len(report.failures) == 1
        assert report.failures[0]["error"] == "EmptyBackgroundError"

    def test_reruns_identical_except_timestamp(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        extractor = LexiconExtractor(helpers.EVAL_LEXICON)
        reports = []
        for run in ("r1", "r2"):
            report = run_attack_batch(manifest, "toy", fast_config(),
                                      tmp_path / run,
                                      encoder_options={"seed": 7},
                                      extractor=extractor)
            payload = report.to_dict()
            payload.pop("generated_at")
            reports.append(json.dumps(payload, sort_keys=True))
        assert reports[0] == reports[1]

    def test_aggregation_permutation_invariant(self, tmp_path):
        base = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        reversed_manifest = type(base)(name=base.name, split=base.split,
                                       items=base.items[::-1])
        extractor = LexiconExtractor(helpers.EVAL_LEXICON)
        fwd = run_attack_batch(base, "toy", fast_config(), tmp_path / "f",
                               encoder_options={"seed": 7}, extractor=extractor)
        rev = run_attack_batch(reversed_manifest, "toy", fast_config(),
                               tmp_path / "r", encoder_options={"seed": 7},
                               extractor=extractor)
        for key, value in fwd.aggregates.items():
            if value is None:
                assert rev.aggregates[key] is None
            else:
                assert rev.aggregates[key] == pytest.approx(value, rel=1e-12)

    def test_persisted_images_within_budget(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        config = fast_config()
        report = run_attack_batch(manifest, "toy", config, tmp_path / "out",
                                  encoder_options={"seed": 7},
                                  extractor=LexiconExtractor(helpers.EVAL_LEXICON))
        for item, manifest_item in zip(report.items, manifest.items):
            clean = load_image(manifest_item.resolved_path)
            adv = load_image(tmp_path / "out" / item["adversarial_image"])
            assert np.abs(adv.data - clean.data).max() <= config.epsilon + 2 / 255

    def test_empty_manifest_rejected(self, tmp_path):
        path = write_manifest(tmp_path, [])
        with pytest.raises(EmptyDatasetError):
            run_attack_batch(load_manifest(path), "toy", fast_config(),
                             tmp_path / "out")

    def test_captions_without_extractor_rejected(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        with pytest.raises(ExtractorUnavailable):
            run_attack_batch(manifest, "toy", fast_config(), tmp_path / "out")

    def test_parallel_workers_match_serial(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        extractor = LexiconExtractor(helpers.EVAL_LEXICON)
        serial = run_attack_batch(manifest, "toy", fast_config(), tmp_path / "s",
                                  encoder_options={"seed": 7}, extractor=extractor)
        parallel = run_attack_batch(manifest, "toy", fast_config(), tmp_path / "p",
                                    encoder_options={"seed": 7},
                                    extractor=extractor, workers=3)
        a, b = serial.to_dict(), parallel.to_dict()
        a.pop("generated_at"), b.pop("generated_at")
        assert a == b

    def test_non_reentrant_adapter_serialized(self, tmp_path):
        from bcr import register_adapter, toy_encoder

        class ExclusiveEncoder:
            reentrant = False

            def __init__(self, **options):
                self._inner = toy_encoder(int(options.get("seed", 0)))
                self.descriptor = self._inner.descriptor
                self.metadata = self._inner.metadata
                self.active = 0

            def features(self, pixels, layers):
                return self._inner.features(pixels, layers)

            def features_with_vjp(self, pixels, layers):
                self.active += 1
                assert self.active == 1, "concurrent use of exclusive adapter"
                try:
                    return self._inner.features_with_vjp(pixels, layers)
                finally:
                    self.active -= 1

        register_adapter("toy-exclusive-test", ExclusiveEncoder)
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        report = run_attack_batch(
            manifest, "toy-exclusive-test", fast_config(), tmp_path / "out",
            encoder_options={"seed": 7},
            extractor=LexiconExtractor(helpers.EVAL_LEXICON), workers=4)
        assert len(report.items) == 3 and not report.failures


class TestReports:
    def test_write_read_round_trip(self, tmp_path):
        payload = {"items": [{"index": 0}], "aggregates": {"C": 0.5}}
        write_report(payload, tmp_path / "r.json")
        assert read_report(tmp_path / "r.json") == payload

    def test_emit_plots_cardinality(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        report = run_attack_batch(manifest, "toy", fast_config(), tmp_path / "out",
                                  encoder_options={"seed": 7},
                                  extractor=LexiconExtractor(helpers.EVAL_LEXICON))
        written = emit_plots(report, tmp_path / "plots")
        names = sorted(p.split("/")[-1] for p in written)
        assert names == ["aggregates.png", "loss_item_000.png",
                         "loss_item_001.png", "loss_item_002.png"]

    def test_emit_plots_empty_report(self, tmp_path, capsys):
        written = emit_plots({"items": [], "aggregates": {}}, tmp_path / "plots")
        assert written == []
        assert "nothing to plot" in capsys.readouterr().out


class TestLayerSweep:
    def test_groups_keyed_reports(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        sweep = run_layer_sweep(
            manifest, "toy", fast_config(),
            {"early": [1, 2], "late": [3, 4]}, tmp_path / "sweep",
            encoder_options={"seed": 7},
            extractor=LexiconExtractor(helpers.EVAL_LEXICON))
        assert set(sweep["groups"]) == {"early", "late"}
        assert (tmp_path / "sweep/early/report.json").is_file()
        assert (tmp_path / "sweep/late/report.json").is_file()
        assert "Targeted Layers" in sweep["table"]

    def test_layer_out_of_range_group(self, tmp_path):
        manifest = load_manifest(helpers.write_eval_manifest(tmp_path / "d"))
        with pytest.raises(LayerOutOfRange):
            run_layer_sweep(manifest, "toy", fast_config(), {"bad": [9]},
                            tmp_path / "sweep")

    def test_default_groups_shapes(self):
        groups = default_layer_groups(12)
        assert groups["early"] == [1, 2, 3, 4]
        assert groups["late"] == [9, 10, 11, 12]
        assert groups["middle"] == [5, 6, 7, 8]
        shallow = default_layer_groups(4)
        assert shallow == {"early": [1, 2, 3, 4]}


class TestCli:
    def test_attack_subcommand(self, tmp_path, capsys):
        save_image(helpers.eval_scene(0), tmp_path / "scene.png")
        rc = main([
            "attack", "--image", str(tmp_path / "scene.png"),
            "--roi", "4,4,4,4", "--encoder", "toy",
            "--encoder-option", "seed=7", "--steps", "4",
            "--out", str(tmp_path / "out"),
        ])
        assert rc == 0
        assert (tmp_path / "out/adversarial.png").is_file()
        result = read_report(tmp_path / "out/result.json")
        assert len(result["loss_trace"]["total"]) == 4
        assert "realized l-inf" in capsys.readouterr().out

    def test_eval_subcommand_with_grounding(self, tmp_path, grounding_stub):
        manifest_path = helpers.write_eval_manifest(tmp_path / "d")
        rc = main([
            "eval", "--manifest", str(manifest_path), "--encoder", "toy",
            "--encoder-option", "seed=7", "--steps", "4",
            "--lexicon", str(tmp_path / "d/lexicon.txt"),
            "--grounding-endpoint", grounding_stub.endpoint,
            "--out", str(tmp_path / "out"),
        ])
        assert rc == 0
        report = read_report(tmp_path / "out/report.json")
        assert report["aggregates"]["C"] == pytest.approx(2 / 3)
        assert report["aggregates"]["GH"] == pytest.approx(1 / 3)

    def test_eval_missing_manifest_is_clean_error(self, tmp_path, capsys):
        rc = main(["eval", "--manifest", str(tmp_path / "nope.json"),
                   "--encoder", "toy", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "ParseError" in capsys.readouterr().err

    def test_sweep_subcommand(self, tmp_path, capsys):
        manifest_path = helpers.write_eval_manifest(tmp_path / "d")
        rc = main([
            "sweep", "--manifest", str(manifest_path), "--encoder", "toy",
            "--encoder-option", "seed=7", "--steps", "3",
            "--groups", "early=1,2;late=3,4",
            "--lexicon", str(tmp_path / "d/lexicon.txt"),
            "--out", str(tmp_path / "sweep"),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "Targeted Layers" in out
        assert (tmp_path / "sweep/sweep_table.txt").is_file()

    def test_config_file_layers_and_flags(self, tmp_path):
        cfg = tmp_path / "attack.cfg"
        cfg.write_text("epsilon=0.1\nlayers=1,2\nsteps=3\n")
        values = load_config_file(cfg)
        assert values == {"epsilon": 0.1, "layers": frozenset({1, 2}), "steps": 3}
        cfg_json = tmp_path / "attack.json"
        cfg_json.write_text(json.dumps({"epsilon": 0.15, "step_rule":
                                        "plain-gradient"}))
        values = load_config_file(cfg_json)
        assert values["epsilon"] == 0.15
        assert values["step_rule"] == "plain-gradient"

    def test_config_file_unknown_key(self, tmp_path):
        cfg = tmp_path / "attack.cfg"
        cfg.write_text("opacity=0.5\n")
        with pytest.raises(ParseError):
            load_config_file(cfg)
