"""Config files (TOML or JSON) mapped onto dataclasses."""

import json
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError


def load_config(path):
    """Read a TOML or JSON file into a dict."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError:
        raise
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return data


def build(cls, section=None, **overrides):
    """Instantiate dataclass ``cls`` from a config section plus non-None overrides."""
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in (section or {}).items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} field {key!r}")
        values[key] = tuple(value) if isinstance(value, list) else value
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None
