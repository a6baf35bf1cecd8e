"""Tests for run configuration loading."""

import json
from pathlib import Path

import pytest

from wsod_labels.config import (
    RunConfig,
    apply_overrides,
    build_config,
    load_config,
    parse_config_text,
)
from wsod_labels.errors import BadInputError
from wsod_labels.trainer import TrainerConfig


class TestParseConfigText:
    """Test config parsing."""

    def test_key_value(self):
        """Test key=value lines with comments and blank lines."""
        text = "# thresholds\ntau_low = 0.25  # looser\n\nhgps.stages=2\nseed=7\n"
        assert parse_config_text(text) == {"tau_low": "0.25", "hgps.stages": "2", "seed": "7"}

    def test_json_sections(self):
        """Test that JSON sections are flattened to dotted keys."""
        text = '{"prng": "splitmix64", "seed": 3, "hgps": {"r": 1.3}, "epochs": 2}'
        assert parse_config_text(text) == {"seed": 3, "hgps.r": 1.3, "epochs": 2}

    def test_missing_equals(self):
        """Test that a line without '=' is rejected."""
        with pytest.raises(BadInputError):
            parse_config_text("tau_low 0.3")

    def test_malformed_json(self):
        """Test that broken JSON is rejected."""
        with pytest.raises(BadInputError):
            parse_config_text('{"seed": ')


class TestBuildConfig:
    """Test building a RunConfig from flat settings."""

    def test_typed_values(self):
        """Test that string values are coerced to field types."""
        cfg = build_config(
            {
                "tau_low": "0.25",
                "hgps.stages": "2",
                "seed": "7",
                "use_cls_ign": "off",
                "lr_decay_epoch": "none",
                "use_07_metric": "true",
            }
        )
        assert cfg.hgps.tau_low == 0.25
        assert cfg.hgps.stages == 2
        assert cfg.seed == 7
        assert cfg.trainer.seed == 7
        assert cfg.trainer.use_cls_ign is False
        assert cfg.trainer.lr_decay_epoch is None
        assert cfg.eval.use_07_metric is True

    def test_round_trip(self):
        """Test that a dumped config builds back to an equal config."""
        cfg = build_config({"r": 1.3, "num_scenes": 4, "lr_decay_epoch": 5, "seed": 9})
        text = json.dumps(cfg.to_dict())
        assert build_config(parse_config_text(text)) == cfg

    @pytest.mark.parametrize(
        "flat",
        [
            {"nonsense": 1},
            {"bogus.r": 1.3},
            {"hgps.lr": 0.1},
            {"stages": "two"},
            {"use_cls_ign": "maybe"},
        ],
    )
    def test_bad_input(self, flat):
        """Test that unknown keys and unparsable values are rejected."""
        with pytest.raises(BadInputError):
            build_config(flat)

    def test_seed_reaches_trainer(self):
        """Test that a top-level seed seeds the trainer unless the trainer section sets one."""
        assert build_config({"seed": 7}).trainer.seed == 7
        cfg = build_config({"seed": 7, "trainer.seed": 3})
        assert (cfg.seed, cfg.trainer.seed) == (7, 3)
        assert build_config({"r": 1.3}).trainer.seed == TrainerConfig().seed

    def test_trainer_modes(self):
        """Test that base model, selector and detection source are config keys."""
        cfg = build_config({"base_model": "wsddn", "selector": "hgps", "detection_source": "ws0"})
        assert cfg.trainer == TrainerConfig.preset("wsddn_hgps", detection_source="ws0")
        with pytest.raises(ValueError):
            build_config({"selector": "oicr"})

    def test_invalid_combination(self):
        """Test that component validation still applies."""
        with pytest.raises(ValueError):
            build_config({"tau_low": 0.9})


class TestLoadConfig:
    """Test loading config files."""

    @pytest.mark.asyncio
    async def test_load(self, tmp_path):
        """Test loading a key=value file."""
        path = tmp_path / "run.cfg"
        path.write_text("stages = 2\nnum_scenes = 3\n")
        cfg = await load_config(path)
        assert cfg.hgps.stages == 2
        assert cfg.synth.num_scenes == 3

    @pytest.mark.asyncio
    async def test_json_seed(self, tmp_path):
        """Test that the seed of a JSON config file reaches the trainer."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 42, "hgps": {"stages": 2}}))
        cfg = await load_config(path)
        assert cfg.seed == cfg.trainer.seed == 42

    @pytest.mark.asyncio
    async def test_missing(self, tmp_path):
        """Test that a missing file is bad input."""
        with pytest.raises(BadInputError):
            await load_config(tmp_path / "absent.cfg")


class TestApplyOverrides:
    """Test command-line overrides."""

    def test_flags_win(self):
        """Test that every flag replaces the config value."""
        cfg = apply_overrides(
            RunConfig(),
            seed=5,
            out_dir="elsewhere",
            no_cls_ign=True,
            stages=2,
            thresholds=(0.2, 0.9),
            scale=1.5,
        )
        assert cfg.seed == 5 and cfg.trainer.seed == 5
        assert cfg.out_dir == Path("elsewhere")
        assert cfg.trainer.use_cls_ign is False
        hgps = cfg.hgps
        assert (hgps.stages, hgps.tau_low, hgps.tau_high, hgps.r) == (2, 0.2, 0.9, 1.5)

    def test_no_flags(self):
        """Test that omitted flags keep the config."""
        assert apply_overrides(RunConfig()) == RunConfig()

    def test_preset(self):
        """Test that a preset sets the base model and selector."""
        cfg = apply_overrides(RunConfig(), preset="wsbdn_top_scoring")
        assert (cfg.trainer.base_model, cfg.trainer.selector) == ("wsbdn", "top_scoring")
        with pytest.raises(BadInputError):
            apply_overrides(RunConfig(), preset="oicr")

    def test_invalid_thresholds(self):
        """Test that reversed thresholds are rejected."""
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), thresholds=(0.9, 0.3))
