import pytest

from kvpack.compressor import RankScheme
from kvpack.config import config_to_dict, load_config, parse_config
from kvpack.decoder import GroupSpec
from kvpack.errors import ConfigError

EXAMPLE = """
workload:
  num_heads: 8
  num_kv_heads: 2
  head_dim: 16
  visual: {rank: 8, noise: 0.0, shared_dim: 4}
  decode_steps: 4
decode:
  period: 32
  rank_kv: {kind: linear, first: 16, last: 128, num_layers: 32}
  rank_vv: 16
  value_groups: {ratios: [0.25, 0.75], ranks: [16, 4]}
  svd_method: randomized
"""


def test_load(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(EXAMPLE)
    spec, cfg = load_config(path)
    assert spec.num_kv_heads == 2 and spec.visual.shared_dim == 4
    assert cfg.rank_kv == RankScheme.linear(16, 128, 32)
    assert cfg.value_groups == GroupSpec((0.25, 0.75), (16, 4))
    assert cfg.period == 32 and cfg.svd_method == "randomized"


def test_round_trip_through_dict(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(EXAMPLE)
    spec, cfg = load_config(path)
    assert parse_config(config_to_dict(spec, cfg)) == (spec, cfg)


@pytest.mark.parametrize(
    "mapping",
    [
        {"workload": {"num_head": 4}},
        {"decode": {"rank": 4}},
        {"decoding": {}},
        {"decode": {"value_groups": {"ratios": [0.5, 0.5], "ranks": [8, 2], "extra": 1}}},
        {"decode": {"rank_kv": {"kind": "linear", "slope": 2}}},
        {"decode": {"period": 0}},
        {"decode": {"rank_vv": "big"}},
        {"workload": {"visual": {"rank": 1000}}},
        {"decode": []},
        [],
    ],
)
def test_invalid_configs(mapping):
    with pytest.raises(ConfigError):
        parse_config(mapping)


@pytest.mark.parametrize("value", [None, "inf", "never"])
def test_period_infinity(value):
    assert parse_config({"decode": {"period": value}})[1].period is None


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("decode: [unclosed")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    spec, cfg = load_config(path)
    assert spec.num_heads == 4 and cfg.rank_kv == 64
