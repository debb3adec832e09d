"""Strict TOML run configuration.

A run config has a top-level ``seed`` and the sections ``[data]``,
``[model]``, ``[train]``, ``[sample]`` and ``[augment]``. Every key is
optional; missing keys take the defaults of the corresponding dataclass.
Unknown keys and wrongly typed values are rejected. Per-module seeds are
not configurable: they are all derived from the global seed.

Defaults::

    seed = 0

    [data]
    train_dir = ""        # directory of <stem>_src/_tgt/_mask.nii.gz triples
    val_dir = ""          # optional held-out triples
    p_high = 99.5         # normalization percentile
    in_plane = 0          # crop/pad slices to in_plane x in_plane; 0 keeps size

    [model]   NetConfig fields (channel_widths, attention_levels, ...)
    [train]   TrainConfig fields except seed
    [sample]  SamplerConfig fields except seed
    [augment] AugmentPolicy fields
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .artifacts import AugmentPolicy
from .errors import ConfigError, ConfigTypeError, DataError, FlowSynthError, UnknownKeyError
from .io_utils import sha256_bytes
from .nets import NetConfig
from .sampling import SamplerConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    train_dir: str = ""
    val_dir: str = ""
    p_high: float = 99.5
    in_plane: int = 0

    def __post_init__(self):
        if not 0.0 < self.p_high <= 100.0:
            raise ConfigError(f"p_high must lie in (0, 100], got {self.p_high}")
        if self.in_plane < 0:
            raise ConfigError(f"in_plane must be >= 0, got {self.in_plane}")


_SECTIONS = {
    "data": DataConfig,
    "model": NetConfig,
    "train": TrainConfig,
    "sample": SamplerConfig,
    "augment": AugmentPolicy,
}
_DERIVED = {"train": {"seed"}, "sample": {"seed"}}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            for key in _DERIVED.get(name, ()):
                section.pop(key)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def digest(self) -> str:
        return sha256_bytes(serialize(self).encode())


def _section_fields(cls) -> dict[str, Any]:
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            defaults[f.name] = f.default_factory()
    return defaults


def _check_type(where: str, value, default):
    """Validate ``value`` against the type of ``default``; return it coerced."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and len(value) > 0
        if ok and default:
            value = tuple(_check_type(f"{where}[{i}]", v, default[0]) for i, v in enumerate(value))
    else:
        ok = True
    if not ok:
        raise ConfigTypeError(f"{where}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})")
    return value


def from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - {"seed", *_SECTIONS})
    if unknown:
        raise UnknownKeyError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = _check_type("seed", doc.get("seed", 0), 0)
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    built = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigTypeError(f"[{name}] must be a table")
        defaults = _section_fields(cls)
        allowed = set(defaults) - _DERIVED.get(name, set())
        bad = sorted(set(section) - allowed)
        if bad:
            raise UnknownKeyError(f"unknown key(s) in [{name}]: {', '.join(bad)}")
        kwargs = {k: _check_type(f"{name}.{k}", v, defaults[k]) for k, v in section.items()}
        if name in _DERIVED:
            kwargs["seed"] = seed
        try:
            built[name] = cls(**kwargs)
        except ConfigTypeError:
            raise
        except FlowSynthError as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return RunConfig(seed=seed, **built)


def parse_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: config {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(doc)


def parse_config_text(text: str) -> RunConfig:
    try:
        return from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc


def serialize(config: RunConfig) -> str:
    """Normalized TOML text: every key present, sections in fixed order."""
    return tomli_w.dumps(config.to_dict())
