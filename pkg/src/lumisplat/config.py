"""Human-readable run configuration (YAML key-value).

The default schedule is the full-scale one; `toy_config` is the desk-scale
preset used by the acceptance run.  Loading rejects unknown keys so typos
fail loudly instead of silently training with defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .losses import LossWeights
from .model import ModelConfig
from .scenes import SceneSpec

PAPER_STAGES = (5000, 25000, 120000)
TOY_STAGES = (500, 2500, 12000)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_scenes: int = 8
    stages: tuple[int, int, int] = PAPER_STAGES   # cumulative stage-end iterations
    lr: float = 1.5e-4
    batch_scenes: int = 2
    out_dir: str = "runs/default"
    log_every: int = 1
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        a, b, c = self.stages
        if not 0 < a < b < c:
            raise ValueError("stage boundaries must be strictly increasing")
        if self.n_scenes < 1 or self.batch_scenes < 1 or self.lr <= 0:
            raise ValueError("bad training config")


def toy_config(out_dir: str = "runs/toy", seed: int = 0) -> TrainConfig:
    # batch of one: per-pixel primitives make each scene pass ~16x heavier
    # than per-cell prototypes, and the overfit regime needs no batch noise
    return TrainConfig(seed=seed, stages=TOY_STAGES, out_dir=out_dir,
                       batch_scenes=1)


_NESTED = {"scene": SceneSpec, "model": ModelConfig, "weights": LossWeights}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _NESTED:
            out[f.name] = {g.name: _plain(getattr(v, g.name)) for g in dataclasses.fields(v)}
        else:
            out[f.name] = _plain(v)
    return out


def _build(cls, data: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = names[k].default
        if isinstance(v, list):
            v = tuple(v)
        if isinstance(default, tuple) and not isinstance(v, tuple):
            raise ValueError(f"{where}.{k} must be a list")
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    nested = {}
    for key, cls in _NESTED.items():
        if key in data:
            sub = data.pop(key)
            if not isinstance(sub, dict):
                raise ValueError(f"{key} must be a mapping")
            nested[key] = _build(cls, sub, key)
    cfg = _build(TrainConfig, data, "config")
    return dataclasses.replace(cfg, **nested)


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def load_config(path: str) -> TrainConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a key-value mapping")
    return config_from_dict(data)
