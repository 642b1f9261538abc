"""
Tests for YAML configuration loading, dotted overrides and validation
"""

import logging

import pytest
import yaml

from src.config import ExperimentConfig
from src.errors import ConfigError
from src.logging_utils import LOG_LEVEL_ENV, configure_logging


class TestLoading:
    def test_defaults_are_valid(self):
        config = ExperimentConfig().validate()
        assert config.train.lambda_ma == 10.0
        assert config.train.lambda_triplet == 0.001
        assert config.encoder.dims() == {"rgb": 128, "audio": 32, "flow": 64}

    def test_yaml_sections(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"train": {"lr": 0.01, "ablate": ["ma"]},
                                        "fusion": {"tcn_dilations": [1, 3]}}))
        config = ExperimentConfig.load(path)
        assert config.train.lr == 0.01
        assert config.train.ablate == ["ma"]
        assert config.fusion.tcn_dilations == (1, 3)

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("model:\n  depth: 3\n")
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.load(path)
        assert err.value.key == "model"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "absent.yaml")

    def test_non_mapping(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_yaml(path)

    def test_save_load_round_trip(self, tmp_path):
        config = ExperimentConfig()
        config.apply_overrides(["gen.audio_lag=[0, 2]", "train.k_search=40", "train.ablate=[umil, ma]"])
        back = ExperimentConfig.from_yaml(config.save(tmp_path / "c.yaml"))
        assert back.to_dict() == config.to_dict()
        assert back.gen.audio_lag == (0, 2)


class TestOverrides:
    def test_dotted_types(self):
        config = ExperimentConfig()
        config.apply_overrides(["train.iterations=12", "train.lr=1e-3", "train.align_to_encoder=false",
                                "train.sparsify_mode=gather"])
        assert config.train.iterations == 12 and isinstance(config.train.iterations, int)
        assert config.train.lr == pytest.approx(1e-3)
        assert config.train.align_to_encoder is False
        assert config.train.sparsify_mode == "gather"

    @pytest.mark.parametrize("override", ["train.bogus=1", "nothing=1", "train=3"])
    def test_unknown_key(self, override):
        with pytest.raises(ConfigError):
            ExperimentConfig().apply_overrides([override])

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().apply_overrides(["train.lr"])

    @pytest.mark.parametrize("override", ["train.iterations=2.5", "train.align_to_encoder=3", "train.lr=fast"])
    def test_bad_values(self, override):
        with pytest.raises(ConfigError):
            ExperimentConfig().apply_overrides([override])

    def test_optional_null(self):
        config = ExperimentConfig()
        config.apply_overrides(["train.k_search=null"])
        assert config.train.k_search is None
        with pytest.raises(ConfigError):
            config.apply_overrides(["train.lr=null"])


class TestValidation:
    @pytest.mark.parametrize("override,key", [
        ("encoder.d_flow=256", "encoder.d_rgb"),
        ("encoder.local_window=4", "encoder.local_window"),
        ("encoder.d_audio=30", "encoder.d_audio"),
        ("train.lambda_ma=-1", "train.lambda_ma"),
        ("train.ablate=[speed]", "train.ablate"),
        ("train.t_train=8", "train.t_train"),
        ("train.eps=0.7", "train.eps"),
        ("gen.t_max=10", "gen.t_max"),
        ("gen.audio_lag=[0, 20]", "gen.audio_lag"),
    ])
    def test_rejected(self, override, key):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.load(None, [override])
        assert err.value.key == key

    def test_triplet_needs_two_bags(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(None, ["train.batch_size=1"])
        config = ExperimentConfig.load(None, ["train.batch_size=1", "train.ablate=[triplet]"])
        assert config.train.batch_size == 1


class TestLogging:
    def test_env_level(self, monkeypatch):
        monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
        assert configure_logging() == logging.DEBUG

    def test_explicit_level_wins(self, monkeypatch):
        monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
        assert configure_logging("warning") == logging.WARNING

    def test_unknown_level_falls_back(self, monkeypatch):
        monkeypatch.delenv(LOG_LEVEL_ENV, raising=False)
        assert configure_logging("chatty") == logging.INFO
