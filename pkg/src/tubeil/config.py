"""YAML configuration with dotted-key overrides."""
from __future__ import annotations

import copy
from importlib import resources
from typing import Iterable, Optional

import yaml

from .errors import ConfigError
from .sim import MultirotorParams


def defaults() -> dict:
    with resources.files(__package__).joinpath("defaults.yaml").open() as fh:
        return yaml.safe_load(fh)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, item: str) -> dict:
    """Apply a ``section.key=value`` override; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value: {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown section in override: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown key in override: {key}")
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def load(path: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    cfg = defaults()
    if path:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def vehicle(cfg: dict) -> MultirotorParams:
    return MultirotorParams(**cfg["vehicle"])
