"""Experiment configuration files (YAML).

Example::

    name: micro-top3
    seed: 0
    backbone: {preset: micro}
    fusion: {top_k: 3, lateral_channels: 16, head_units: 64}
    train: {learning_rate: 0.001, max_epochs: 60}
    augmentation: {rotation: 15, shear: 5, brightness: 0.2, zoom: 0.2, horizontal_flip: true}
    class_weights: proportional
    data: {manifest: data/manifest.csv, folds: 5, val_fraction: 0.2}
    output: out

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .backbone import PRESETS, BackboneConfig
from .data import WEIGHT_SCHEMES, AugmentationConfig
from .fusion import FusionConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: str | None = None
    folds: int = 5
    val_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    backbone: BackboneConfig = PRESETS["vgg16"]
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(top_k=5))
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    class_weights: str = "proportional"
    data: DataConfig = field(default_factory=DataConfig)
    output: str = "out"
    base_dir: Path = field(default_factory=Path.cwd, repr=False, compare=False)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "backbone": self.backbone.to_dict(),
            "fusion": self.fusion.to_dict(),
            "train": self.train.to_dict(),
            "augmentation": self.augmentation.to_dict(),
            "class_weights": self.class_weights,
            "data": {"manifest": self.data.manifest, "folds": self.data.folds,
                     "val_fraction": self.data.val_fraction},
            "output": self.output,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _backbone(d: Any) -> BackboneConfig:
    if d is None:
        return PRESETS["vgg16"]
    if isinstance(d, str):
        d = {"preset": d}
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown backbone preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]
        if "input_size" in d:
            base = BackboneConfig(base.blocks, tuple(d.pop("input_size")), base.name)
        if d:
            raise ConfigError(f"unexpected backbone keys next to a preset: {sorted(d)}")
        return base
    return BackboneConfig.from_dict(d)


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    known = {"name", "seed", "backbone", "fusion", "train", "augmentation", "class_weights", "data", "output"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        seed = int(raw.get("seed", 0))
        train = dict(raw.get("train") or {})
        train.setdefault("seed", seed)
        fusion = dict(raw.get("fusion") or {"top_k": 5})
        cfg = ExperimentConfig(
            name=str(raw.get("name", "experiment")),
            seed=seed,
            backbone=_backbone(raw.get("backbone")),
            fusion=FusionConfig(**fusion),
            train=TrainConfig(**train),
            augmentation=AugmentationConfig(**(raw.get("augmentation") or {})),
            class_weights=str(raw.get("class_weights", "proportional")),
            data=DataConfig(**(raw.get("data") or {})),
            output=str(raw.get("output", "out")),
            base_dir=base_dir or Path.cwd(),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.class_weights not in WEIGHT_SCHEMES:
        raise ConfigError(f"class_weights must be one of {WEIGHT_SCHEMES}, got {cfg.class_weights!r}")
    if cfg.fusion.top_k > cfg.backbone.n_scales:
        raise ConfigError(f"top_k={cfg.fusion.top_k} exceeds the {cfg.backbone.n_scales} backbone scales")
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw or {}, path.resolve().parent)


def override(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides (values parsed as YAML scalars)."""
    raw = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(value)
    # preset names are expanded in to_dict(); blocks/input_size carry through
    return from_dict(raw, cfg.base_dir)


def with_top_k(cfg: ExperimentConfig, top_k: int) -> ExperimentConfig:
    fusion = FusionConfig(**{**cfg.fusion.to_dict(), "top_k": top_k})
    if top_k > cfg.backbone.n_scales:
        raise ConfigError(f"top_k={top_k} exceeds the {cfg.backbone.n_scales} backbone scales")
    return replace(cfg, fusion=fusion)
