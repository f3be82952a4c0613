"""Run-config serialization: nested dataclasses <-> YAML, overrides, hashing.

One document fully describes a run; CLI overrides address fields with dotted
keys (``optim.lr=1e-3``). Unknown keys fail with the offending field path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path

import yaml

from .errors import ConfigError


def config_to_dict(obj) -> dict:
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"{type(obj).__name__} is not a config dataclass")

    def convert(value):
        if dataclasses.is_dataclass(value):
            return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(obj)


def _coerce(value, annotation, path: str):
    origin = typing.get_origin(annotation)
    if dataclasses.is_dataclass(annotation):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return config_from_dict(annotation, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a sequence")
        return tuple(value)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path) if args else value
    if annotation is float and isinstance(value, int):
        return float(value)
    return value


def config_from_dict(cls, data: dict, path: str = "") -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config field {path + '.' if path else ''}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub_path = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub_path)
    return cls(**kwargs)


def config_hash(cfg) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # yaml 1.1 reads "1e-3" as a string; accept plain scientific notation
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted-key=value overrides; values parse as YAML scalars."""
    out = json.loads(json.dumps(data))  # deep copy of plain structures
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict):
                raise ConfigError(f"unknown config field {key}")
            node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"unknown config field {key}")
        # field-name validity is checked when the dataclass is built
        node[parts[-1]] = _parse_scalar(raw)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return data or {}


def dump_config(cfg, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def run_config_from_sources(path=None, overrides: list[str] | None = None):
    """Build a RunConfig from an optional YAML file plus dotted overrides."""
    from .training import RunConfig

    data = load_config_file(path) if path else {}
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(RunConfig, data)
