"""YAML experiment configuration.

A config file has two sections whose keys are exactly the field names of
:class:`~kvpack.harness.WorkloadSpec` and :class:`~kvpack.decoder.DecodeConfig`::

    workload:
      num_heads: 4
      visual: {rank: 8, noise: 0.0}
    decode:
      period: 32
      rank_kv: 16
      rank_vv: {kind: linear, first: 16, last: 128, num_layers: 32}
      value_groups: {ratios: [0.25, 0.75], ranks: [16, 4]}

Unknown keys anywhere raise :class:`~kvpack.errors.ConfigError`.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import yaml

from kvpack.compressor import RankScheme
from kvpack.decoder import DecodeConfig, GroupSpec
from kvpack.errors import ConfigError, KVPackError
from kvpack.harness import RankProfile, WorkloadSpec


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, mapping, where: str, convert=None):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(mapping).__name__}")
    unknown = set(mapping) - _field_names(cls)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = dict(mapping)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (KVPackError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _rank(value, where: str):
    if value is None or isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, dict):
        return _build(RankScheme, value, where)
    raise ConfigError(f"{where} must be an integer, null or a rank scheme mapping")


def _groups(value, where: str):
    if value is None:
        return None
    return _build(GroupSpec, value, where, {"ratios": _seq, "ranks": _seq})


def _seq(value, where: str):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where} must be a list")
    return tuple(value)


def _period(value, where: str):
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity", "never")):
        return None
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    raise ConfigError(f"{where} must be an integer or null")


def _profile(value, where: str):
    return _build(RankProfile, value, where)


DECODE_CONVERTERS = {
    "period": _period,
    "rank_kv": _rank,
    "rank_vv": _rank,
    "rank_kt": _rank,
    "rank_vt": _rank,
    "key_groups": _groups,
    "value_groups": _groups,
}


def parse_config(mapping: dict[str, Any]) -> tuple[WorkloadSpec, DecodeConfig]:
    if not isinstance(mapping, dict):
        raise ConfigError("config must be a mapping with 'workload' and 'decode' sections")
    unknown = set(mapping) - {"workload", "decode"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    spec = _build(
        WorkloadSpec, mapping.get("workload"), "workload", {"visual": _profile, "text": _profile}
    )
    cfg = _build(DecodeConfig, mapping.get("decode"), "decode", DECODE_CONVERTERS)
    return spec, cfg


def load_config(path) -> tuple[WorkloadSpec, DecodeConfig]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(mapping or {})


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(spec: WorkloadSpec, cfg: DecodeConfig) -> dict[str, Any]:
    """Inverse of :func:`parse_config`, used to echo configs into reports."""
    return {"workload": _plain(spec), "decode": _plain(cfg)}
