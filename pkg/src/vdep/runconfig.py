"""Run configuration files: a JSON document with ``model``, ``train`` and
``data`` sections mirroring ModelConfig, TrainConfig and DatasetSpec.

Validation happens before any compute; unknown keys and wrong types are
rejected with the offending key and the expected type named.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .data import DatasetSpec
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DatasetSpec,
}

# DatasetSpec.size has no default; everything else falls back to the
# dataclass defaults.
_REQUIRED = {"data": ("size",)}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DatasetSpec


def _coerce(section: str, name: str, expected: type, value):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is bool:
        if isinstance(value, bool):
            return value
    elif isinstance(value, expected) and not isinstance(value, bool):
        return value
    elif expected is str and isinstance(value, str):
        return value
    raise ConfigError(
        f"config key '{section}.{name}': expected {expected.__name__}, "
        f"got {type(value).__name__}")


def _build_section(section: str, payload: dict):
    cls = _SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if not isinstance(payload, dict):
        raise ConfigError(f"config section '{section}' must be an object")
    kwargs = {}
    for key, value in payload.items():
        if key not in fields:
            raise ConfigError(
                f"unknown config key '{section}.{key}' "
                f"(known: {', '.join(sorted(fields))})")
        kwargs[key] = _coerce(section, key, _field_type(fields[key]), value)
    for required in _REQUIRED.get(section, ()):
        if required not in kwargs:
            raise ConfigError(f"config key '{section}.{required}' is required")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"config section '{section}' invalid: {exc}") from exc


def _field_type(f: dataclasses.Field) -> type:
    mapping = {"int": int, "float": float, "bool": bool, "str": str}
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if t not in mapping:
        raise ConfigError(f"unsupported config field type {t!r}")
    return mapping[t]


def parse_run_config(document: dict) -> RunConfig:
    if not isinstance(document, dict):
        raise ConfigError("config root must be a JSON object")
    for key in document:
        if key not in _SECTIONS:
            raise ConfigError(
                f"unknown config section '{key}' (known: data, model, train)")
    if "data" not in document:
        raise ConfigError("config section 'data' is required")
    return RunConfig(
        model=_build_section("model", document.get("model", {})),
        train=_build_section("train", document.get("train", {})),
        data=_build_section("data", document["data"]),
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return parse_run_config(document)


def resolved_document(rc: RunConfig) -> dict:
    """Fully materialized config (all defaults resolved) for replay."""
    return {
        "model": dataclasses.asdict(rc.model),
        "train": dataclasses.asdict(rc.train),
        "data": dataclasses.asdict(rc.data),
    }


def write_resolved_config(rc: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved_document(rc), fh, indent=2, sort_keys=True)
        fh.write("\n")
