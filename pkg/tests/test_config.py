"""Flat key=value parsing, dataclass binding, and round trips."""

from dataclasses import dataclass

import pytest

from crosstalk import config as cfgmod
from crosstalk.errors import ConfigError
from crosstalk.model import ModelConfig
from crosstalk.train import TrainConfig


@dataclass
class Sample:
    count: int = 3
    rate: float = 0.5
    name: str = "x"
    flag: bool = False
    limit: int | None = None


def test_parse_kv_basics():
    text = "a=1\n\n# comment\n b = spaced \n"
    assert cfgmod.parse_kv(text) == {"a": "1", "b": "spaced"}


def test_parse_kv_rejects_garbage():
    with pytest.raises(ConfigError, match="line 1"):
        cfgmod.parse_kv("no equals sign")
    with pytest.raises(ConfigError, match="empty key"):
        cfgmod.parse_kv("=5")
    with pytest.raises(ConfigError, match="duplicate"):
        cfgmod.parse_kv("a=1\na=2")


def test_bind_coerces_types():
    got = cfgmod.bind(Sample, {"count": "7", "rate": "0.25", "name": "y",
                               "flag": "true", "limit": "9"})
    assert got == Sample(7, 0.25, "y", True, 9)


def test_bind_defaults_and_none():
    assert cfgmod.bind(Sample, {}) == Sample()
    assert cfgmod.bind(Sample, {"limit": "none"}).limit is None
    assert cfgmod.bind(Sample, {"flag": "0"}).flag is False


def test_bind_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.bind(Sample, {"typo": "1"})
    with pytest.raises(ConfigError, match="cannot parse"):
        cfgmod.bind(Sample, {"count": "many"})
    with pytest.raises(ConfigError, match="cannot parse"):
        cfgmod.bind(Sample, {"flag": "maybe"})


def test_to_kv_round_trip():
    obj = Sample(2, 1.5, "z", True, None)
    text = cfgmod.to_kv(obj)
    assert "limit" not in text  # None fields omitted
    back = cfgmod.bind(Sample, cfgmod.parse_kv(text))
    assert back == obj


def test_model_config_kv_round_trip():
    cfg = ModelConfig.desk("cse")
    back = cfgmod.bind(ModelConfig, cfgmod.parse_kv(cfgmod.to_kv(cfg)))
    assert back == cfg


@dataclass
class Left:
    alpha: int = 0


@dataclass
class Right:
    beta: int = 0


def test_split_mapping_partitions_keys():
    left, right = cfgmod.split_mapping({"alpha": "1", "beta": "2"}, Left, Right)
    assert left == {"alpha": "1"}
    assert right == {"beta": "2"}
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.split_mapping({"gamma": "3"}, Left, Right)


def test_train_config_from_mapping(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("variant=cse\nd=32\nheads=4\nepochs=2\nbase_lr=0.001\n")
    cfg = TrainConfig.from_mapping(cfgmod.load_kv(path))
    assert cfg.model.variant == "cse"
    assert cfg.epochs == 2
    assert cfg.base_lr == 0.001
    assert cfg.accumulate == 8  # default untouched


def test_train_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigError, match="unknown key"):
        TrainConfig.from_mapping({"variant": "cse", "momentum": "0.9"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"variant": "cse", "epochs": "0"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"variant": "cse", "ctc_weight": "1.5"})


def test_snapshot_is_flat_strings():
    cfg = TrainConfig(model=ModelConfig.desk("cse"), epochs=4)
    snap = cfg.snapshot()
    assert snap["epochs"] == "4"
    assert snap["variant"] == "cse"
    assert all(isinstance(v, str) for v in snap.values())
