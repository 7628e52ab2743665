import json

import pytest

from dyncausal.config import ConfigError, DctoConfig, ExperimentConfig


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert json.loads(cfg.to_json())["dcto"]["R"] == 40


def test_overrides_parse_values():
    cfg = ExperimentConfig().with_overrides(
        ["dcto.R=7", "dcto.eta=0.5", "dism.surrogate=additive", "scenario.K=4", "seed=3",
         "dcto.w_enc=null"])
    assert cfg.dcto.R == 7 and cfg.dcto.eta == 0.5 and cfg.dism.surrogate == "additive"
    assert cfg.scenario.K == 4 and cfg.seed == 3 and cfg.dcto.w_enc is None


@pytest.mark.parametrize("item", ["dcto.nope=1", "nosection.R=1", "dcto.R", "dcto.R=0",
                                  "dism.quantile=2", "scenario.D=1"])
def test_bad_overrides(item):
    with pytest.raises((ConfigError, ValueError)):
        ExperimentConfig().with_overrides([item])


def test_unknown_keys_and_bad_json(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"dcto": {"R": 1, "X": 2}})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")


@pytest.mark.parametrize("kw", [dict(E=0), dict(eta=-1), dict(lambda_W=-1), dict(m=0),
                                dict(w_enc=0)])
def test_dcto_validation(kw):
    with pytest.raises(ConfigError):
        DctoConfig(**kw).validate()


def test_encoder_window_longer_than_series():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(["dcto.w_enc=1000"])
