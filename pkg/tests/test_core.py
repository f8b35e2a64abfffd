import numpy as np
import pytest

from bcr import AttackConfig, RoiSpec, default_config, validate_image
from bcr.errors import BoundsError, RangeError, ShapeError


class TestValidateImage:
    def test_in_range_constant_is_valid(self):
        img = validate_image(np.full((3, 4, 4), 0.5))
        assert img.height == 4 and img.width == 4
        np.testing.assert_array_equal(img.data, 0.5)

    def test_value_above_one_rejected(self):
        bad = np.full((3, 4, 4), 0.5)
        bad[1, 2, 3] = 1.2
        with pytest.raises(RangeError):
            validate_image(bad)

    def test_negative_value_rejected(self):
        bad = np.full((3, 4, 4), 0.5)
        bad[0, 0, 0] = -0.01
        with pytest.raises(RangeError):
            validate_image(bad)

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ShapeError):
            validate_image(np.full((1, 4, 4), 0.5))

    def test_wrong_rank_rejected(self):
        with pytest.raises(ShapeError):
            validate_image(np.full((4, 4), 0.5))

    def test_non_finite_rejected(self):
        bad = np.full((3, 4, 4), 0.5)
        bad[2, 1, 1] = np.nan
        with pytest.raises(RangeError):
            validate_image(bad)

    def test_round_trip_is_identity(self):
        rng = np.random.default_rng(1)
        original = validate_image(rng.uniform(0, 1, size=(3, 5, 7)))
        again = validate_image(original.data)
        np.testing.assert_array_equal(original.data, again.data)

    def test_data_is_read_only(self):
        img = validate_image(np.full((3, 4, 4), 0.5))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 0.1


class TestRoiSpec:
    def test_requires_boxes(self):
        with pytest.raises(BoundsError):
            RoiSpec([])

    def test_rejects_degenerate_box(self):
        with pytest.raises(BoundsError):
            RoiSpec([(2, 2, 2, 4)])

    def test_bounds_check_against_image(self):
        roi = RoiSpec([(0, 0, 8, 8)])
        roi.check_bounds(height=8, width=8)
        with pytest.raises(BoundsError):
            roi.check_bounds(height=4, width=8)


class TestDefaultConfig:
    def test_budget_default(self):
        assert default_config().epsilon == 0.2

    def test_temperature_default(self):
        assert default_config().tau == 0.07

    def test_smoothness_weight_default(self):
        assert default_config().lambda_tv == 0.001

    def test_unit_loss_weights(self):
        cfg = default_config()
        assert cfg.lambda_stat == cfg.lambda_dict == cfg.lambda_pres == 1.0

    def test_step_schedule(self):
        cfg = default_config()
        assert cfg.steps == 200
        assert cfg.step_size == pytest.approx(cfg.epsilon / 20)

    def test_satisfies_invariants(self):
        cfg = default_config()
        assert cfg.epsilon >= 0 and cfg.steps >= 0 and cfg.tau > 0
        assert cfg.layers
        for name in ("lambda_stat", "lambda_dict", "lambda_pres", "lambda_tv"):
            assert getattr(cfg, name) >= 0


class TestAttackConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"epsilon": -0.1},
        {"steps": -1},
        {"tau": 0.0},
        {"lambda_tv": -1e-9},
        {"layers": frozenset()},
        {"similarity_mode": "l2"},
        {"step_rule": "adam"},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)

    def test_with_layers_replaces_set(self):
        cfg = default_config().with_layers([2, 3])
        assert cfg.layers == frozenset({2, 3})
        assert default_config().layers == frozenset({1, 2, 3, 4})

    def test_to_dict_round_trips(self):
        cfg = default_config()
        clone = AttackConfig(**{
            k: (frozenset(v) if k == "layers" else v)
            for k, v in cfg.to_dict().items()
        })
        assert clone == cfg
