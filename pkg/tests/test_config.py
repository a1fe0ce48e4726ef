import dataclasses

import pytest

from lossrank.config import (
    RunConfig,
    format_anchors,
    format_config,
    parse_anchors,
    parse_config,
)
from lossrank.errors import ConfigError


class TestAnchors:
    def test_parse(self):
        assert parse_anchors("1.5x1.5,3.0x3.0") == ((1.5, 1.5), (3.0, 3.0))

    def test_round_trip(self):
        pairs = ((0.1, 2.25), (3.0, 0.30000000000000004))
        assert parse_anchors(format_anchors(pairs)) == pairs

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_anchors("1.5,3.0")
        with pytest.raises(ConfigError):
            parse_anchors("axb")


class TestRunConfig:
    def test_defaults_build_all_objects(self):
        cfg = RunConfig()
        spec = cfg.grid_spec()
        assert spec.grid_size == 8
        assert spec.anchors == ((0.5, 0.5), (1.0, 1.0))
        assert cfg.loss_weights().lambda_coord == 5.0
        assert cfg.lrm_config().hard_example_count == 128
        assert cfg.scene_config().seed == 0

    def test_data_seed_fallback(self):
        assert RunConfig(seed=5).effective_data_seed() == 5
        assert RunConfig(seed=5, data_seed=9).effective_data_seed() == 9

    def test_anchor_count_mismatch(self):
        with pytest.raises(ConfigError):
            RunConfig(anchor_count=3)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            RunConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            RunConfig(momentum=1.0)
        with pytest.raises(ConfigError):
            RunConfig(split_ratio=1.0)
        with pytest.raises(ConfigError):
            RunConfig(ap_interpolation="spline")
        with pytest.raises(ConfigError):
            RunConfig(lambda_coord=-1.0)
        with pytest.raises(ConfigError):
            RunConfig(hard_example_count=0)
        with pytest.raises(ConfigError):
            RunConfig(dataset_count=1)


class TestParse:
    def test_empty_gives_defaults(self):
        assert parse_config("") == RunConfig()

    def test_overrides(self):
        cfg = parse_config(
            "grid_size = 4\nimage_size = 32\nnms_threshold = none\n"
            "lrm_enabled = false\ndata_seed = 11\n")
        assert cfg.grid_size == 4
        assert cfg.nms_threshold is None
        assert cfg.lrm_enabled is False
        assert cfg.data_seed == 11

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# a comment\n\nseed = 3  # trailing\n")
        assert cfg.seed == 3

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("seed = 1\nbogus_key = 2\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("seed = 1\nseed = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("seed 1\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("seed = one\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="lrm_enabled"):
            parse_config("lrm_enabled = yes\n")

    def test_domain_error_surfaces_as_config_error(self):
        with pytest.raises(ConfigError):
            parse_config("anchor_count = 5\n")


class TestFormat:
    def test_round_trip_defaults(self):
        assert parse_config(format_config(RunConfig())) == RunConfig()

    def test_round_trip_awkward_floats(self):
        cfg = RunConfig(learning_rate=0.1 + 0.2, ignore_iou=1 / 3,
                        nms_threshold=None, data_seed=7,
                        anchors="1.1x0.30000000000000004,2.0x2.0")
        assert parse_config(format_config(cfg)) == cfg

    def test_every_key_present(self):
        text = format_config(RunConfig())
        for f in dataclasses.fields(RunConfig):
            assert f"{f.name} = " in text

    def test_none_values_render_as_none(self):
        text = format_config(RunConfig(nms_threshold=None))
        assert "nms_threshold = none\n" in text
        assert "data_seed = none\n" in text
