"""Run configuration: one JSON document holding every module's settings.

Loading is strict: unknown keys anywhere in the tree raise ``ConfigError``,
and ``to_dict(from_dict(d)) == d`` for any document produced by ``to_dict``.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .queries import QueryInitConfig
from .simworld import WorldConfig
from .supervision import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 2e-4
    min_lr_ratio: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    deterministic: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    scenes: int = 10
    out: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{name}")
        elif hint is tuple or typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=1, sort_keys=True) + "\n")


def desk_config(**overrides) -> RunConfig:
    """Small setting that trains in minutes on one CPU core.

    Fewer queries and layers than the default; every mechanism stays on.
    """
    cfg = RunConfig(
        world=WorldConfig(n_objects=4, bounds=20.0),
        decoder=DecoderConfig(layers=3, d_model=32, n_state=32, n_queries=48, floor=16, head_hidden=64,
                              query_init=QueryInitConfig(xy_std=10.0)),
        train=TrainConfig(steps=2000, batch_size=1, lr=2e-3),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
