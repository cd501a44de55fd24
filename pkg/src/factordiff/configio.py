"""Plain-text config files and their canonical serialization.

Format: UTF-8 text, one ``key = value`` per line, ``#`` starts a comment,
blank lines ignored.  Keys must exactly match a field of TrainConfig,
SamplerConfig, or a world parameter; anything else is a hard error.
``seed`` is shared: it seeds the world and training alike.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields as dc_fields, replace
from typing import Dict, Optional, Tuple

from .samplers import SamplerConfig
from .training import TrainConfig

__all__ = ["ConfigError", "parse_config_text", "load_config", "build_configs",
           "config_text", "config_hash", "WORLD_KEYS"]

WORLD_KEYS = {
    "face_dim": int,
    "bkg_dim": int,
    "num_classes": int,
    "exp_dim": int,
    "pose_dim": int,
    "bkg_free_dim": int,
    "sigma_data": float,
    "seed": int,
}

WORLD_DEFAULTS = {
    "face_dim": 16, "bkg_dim": 16, "num_classes": 8, "exp_dim": 2,
    "pose_dim": 2, "bkg_free_dim": 4, "sigma_data": 0.05, "seed": 0,
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r} (expected {kind.__name__})")


def _dataclass_kinds(cls) -> Dict[str, type]:
    # every config field carries a typed default; bool before int matters
    return {f.name: type(f.default) for f in dc_fields(cls)}


def build_configs(raw: Dict[str, str],
                  seed_override: Optional[int] = None
                  ) -> Tuple[Dict, TrainConfig, SamplerConfig]:
    """Typed (world_kwargs, TrainConfig, SamplerConfig) from raw key/values.

    Unknown keys raise ConfigError.  ``seed`` (or the override) is applied
    to both the world and the training config.
    """
    train_kinds = _dataclass_kinds(TrainConfig)
    sampler_kinds = _dataclass_kinds(SamplerConfig)
    world_kwargs = dict(WORLD_DEFAULTS)
    train_kwargs: Dict = {}
    sampler_kwargs: Dict = {}
    for key, value in raw.items():
        known = False
        if key in WORLD_KEYS:
            world_kwargs[key] = _coerce(key, value, WORLD_KEYS[key])
            known = True
        if key in train_kinds:
            train_kwargs[key] = _coerce(key, value, train_kinds[key])
            known = True
        if key in sampler_kinds:
            sampler_kwargs[key] = _coerce(key, value, sampler_kinds[key])
            known = True
        if not known:
            raise ConfigError(f"unknown config key {key!r}")
    if seed_override is not None:
        world_kwargs["seed"] = int(seed_override)
        train_kwargs["seed"] = int(seed_override)
    elif "seed" in train_kwargs:
        world_kwargs["seed"] = train_kwargs["seed"]
    try:
        train_cfg = TrainConfig(**train_kwargs)
        sampler_cfg = SamplerConfig(**sampler_kwargs)
    except ValueError as e:
        raise ConfigError(str(e))
    return world_kwargs, train_cfg, sampler_cfg


def load_config(path, seed_override: Optional[int] = None):
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_config_text(fh.read())
    return build_configs(raw, seed_override)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_text(world_kwargs: Dict, train_cfg: TrainConfig,
                sampler_cfg: SamplerConfig) -> str:
    """Canonical serialization: every key, sorted, one per line."""
    items = dict(world_kwargs)
    for f in dc_fields(TrainConfig):
        items[f.name] = getattr(train_cfg, f.name)
    for f in dc_fields(SamplerConfig):
        items[f.name] = getattr(sampler_cfg, f.name)
    return "\n".join(f"{k} = {_fmt(items[k])}" for k in sorted(items)) + "\n"


def config_hash(world_kwargs: Dict, train_cfg: TrainConfig,
                sampler_cfg: SamplerConfig) -> str:
    text = config_text(world_kwargs, train_cfg, sampler_cfg)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
