"""
Tests for the key-value config format, presets and validation.
"""

import pytest

from src.config import (
    BoundaryMode,
    KernelMode,
    RunConfig,
    load_run_config,
    parse_config_text,
    preset_path,
)
from src.errors import ConfigError, ShapeError


class TestParse:
    def test_defaults_validate(self):
        run = RunConfig().validate()
        assert run.model.required_multiple == 1024
        assert run.loss.lambda_ == 1.0

    def test_values_and_comments(self):
        run = parse_config_text(
            "# comment line\n"
            "encoder.stage_channels = 8, 16,32,64  # trailing\n"
            "sap.kernel_mode = stride\n"
            "sap.pool_to_end = yes\n"
            "loss.lambda = 2.5\n"
            "train.max_steps = none\n"
        )
        assert run.model.encoder.stage_channels == (8, 16, 32, 64)
        assert run.model.sap.kernel_mode == KernelMode.KERNEL_EQUALS_STRIDE
        assert run.model.sap.pool_to_end is True
        assert run.loss.lambda_ == 2.5
        assert run.train.max_steps is None

    @pytest.mark.parametrize("line", [
        "model.fusion_widht = 4",
        "nosection.key = 1",
        "model = 3",
        "model.encoder = 3",
        "loss.cbs_output_size = full",
    ])
    def test_unknown_keys_rejected(self, line):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text(line)

    def test_error_names_source_line(self):
        with pytest.raises(ConfigError, match="my.cfg:2"):
            parse_config_text("model.num_classes = 3\nmodel.fusion_width = wide\n", source="my.cfg")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config_text("model.num_classes 3")

    def test_bad_enum_value(self):
        with pytest.raises(ConfigError, match="invalid value"):
            parse_config_text("model.boundary_mode = sometimes")

    def test_text_round_trip(self):
        run = load_run_config(preset="micro")
        again = parse_config_text(run.to_text()).validate()
        assert again == run

    def test_keys_exclude_derived(self):
        keys = RunConfig().keys()
        assert "loss.lambda" in keys
        assert "boundary.num_classes" not in keys
        assert "loss.cbs_output_size" not in keys


class TestValidate:
    @pytest.mark.parametrize("key,raw", [
        ("sap.pool_count", "6"),
        ("encoder.stage_strides", "4,8,16"),
        ("encoder.stage_strides", "4,8,12,32"),
        ("encoder.stage_strides", "8,4,16,32"),
        ("model.branch_count", "3"),
        ("model.num_classes", "1"),
        ("loss.lambda", "-1"),
        ("boundary.epsilon", "0"),
        ("augment.crop_h", "1000"),
        ("augment.channel_means", "0.5,0.5"),
        ("train.lr_min", "1"),
        ("synth.min_shape_frac", "0"),
        ("synth.min_shape_frac", "0.75"),
        ("synth.max_shape_frac", "1.5"),
    ])
    def test_invalid(self, key, raw):
        run = RunConfig()
        run.set(key, raw)
        with pytest.raises(ConfigError):
            run.validate()

    def test_derived_fields_follow_model(self):
        run = RunConfig()
        run.set("model.boundary_mode", "zero-one")
        run.set("model.cbs_output_size", "full")
        run.set("model.num_classes", "7")
        run.validate()
        assert run.boundary.mode == BoundaryMode.ZERO_ONE_BOUNDARY
        assert run.boundary.num_classes == 7
        assert run.loss.cbs_output_size.value == "full"

    def test_check_input_names_multiple(self):
        with pytest.raises(ShapeError, match="1024"):
            RunConfig().model.check_input(250, 250)


class TestPresets:
    @pytest.mark.parametrize("name", ["cityscapes", "cityscapes-half", "camvid", "micro"])
    def test_presets_validate(self, name):
        assert preset_path(name).exists()
        load_run_config(preset=name)

    def test_half_resolution_preset_pools_four_times(self):
        assert load_run_config(preset="cityscapes-half").model.sap.pool_count == 4

    def test_camvid_trains_twice_the_cityscapes_epochs(self):
        assert load_run_config(preset="camvid").train.epochs == 2 * load_run_config(preset="cityscapes").train.epochs

    def test_unknown_preset_lists_available(self):
        with pytest.raises(ConfigError, match="micro"):
            load_run_config(preset="nope")

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.fusion_width = 16\ntrain.seed = 3\n")
        run = load_run_config(path=str(path), preset="micro", overrides=["train.seed=5"])
        assert run.model.fusion_width == 16
        assert run.train.seed == 5
        assert run.model.encoder.stage_strides == (2, 4, 8, 16)

    def test_override_without_equals(self):
        with pytest.raises(ConfigError):
            load_run_config(preset="micro", overrides=["train.seed"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(path=str(tmp_path / "absent.cfg"))
