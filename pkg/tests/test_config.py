import json

import pytest

from msbdet.config import OptimizerConfig, RunConfig, desk_config
from msbdet.errors import ConfigError
from tiny import tiny_config


@pytest.mark.parametrize("make", [RunConfig, desk_config, tiny_config])
def test_json_round_trip(make, tmp_path):
    cfg = make()
    (tmp_path / "c.json").write_text(cfg.to_json())
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.to_json() == cfg.to_json()


def test_defaults_follow_the_training_protocol():
    opt = RunConfig().optimizer
    assert (opt.learning_rate, opt.epochs, opt.momentum) == (0.01, 10, 0.9)
    assert RunConfig().hdc.dilation_rates == (1, 2, 3)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"optimizer": {"learning_rat": 0.1}})


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(model="fpn+attention")
    with pytest.raises(ConfigError):
        OptimizerConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        RunConfig(gradcheck_precision="float16")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_partial_document_keeps_defaults():
    cfg = RunConfig.from_dict(json.loads('{"seed": 3, "optimizer": {"epochs": 1}}'))
    assert cfg.seed == 3 and cfg.optimizer.epochs == 1 and cfg.optimizer.learning_rate == 0.01
