"""Run configuration: nested dataclasses, YAML round-trip and ``key.path=value`` overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .losses import LossWeights
from .networks import EncoderConfig


@dataclass
class OptimizerConfig:
    lr_depth: float = 2e-5
    lr_pose: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_depth <= 0 or self.lr_pose <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class DataConfig:
    train_root: str | None = None
    split: str | None = None
    frame_stride: int = 1
    val_root: str | None = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 50
    batch_size: int = 8
    max_steps: int | None = None
    seed: int = 0
    min_depth: float = 0.1
    max_depth: float = 100.0
    eval_min_depth: float = 1e-3
    eval_max_depth: float = 80.0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.min_depth <= 0 or self.max_depth <= self.min_depth:
            raise ValueError(f"invalid depth caps ({self.min_depth}, {self.max_depth})")

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value) if sub is not None and value is not None else value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "optimizer"): OptimizerConfig,
    (RunConfig, "data"): DataConfig,
}


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars/lists)."""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        *parents, leaf = key.strip().split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise KeyError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if leaf not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[leaf] = yaml.safe_load(raw)
    return RunConfig.from_dict(data)


def desk_preset(**overrides: Any) -> RunConfig:
    """128x96 images, C=64, M=4, d=16, L=4."""
    config = RunConfig(encoder=EncoderConfig(num_layers=4, num_heads=4, head_dim=16, embed_dim=64, image_size=(96, 128)))
    return dataclasses.replace(config, **overrides)
