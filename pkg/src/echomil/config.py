"""Run configuration: nested YAML files plus command-line overrides.

A config file may set any subset of the sections; everything else keeps its
default. Unknown keys are rejected by name rather than ignored, because a
silently dropped typo ("learning_rwte") is the worst failure mode here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .model import ModelConfig
from .training import TrainConfig

RESOLVED_NAME = "config.resolved"
_TOP_LEVEL_KEYS = ("model", "train", "data", "repeats", "workers")


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    folds: str | None = None
    val_fold: int | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    repeats: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def as_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
            "repeats": self.repeats,
            "workers": self.workers,
        }


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """Parse a YAML run config; with no path, return all defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(_TOP_LEVEL_KEYS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(
        model=ModelConfig.from_dict(raw.get("model") or {}),
        train=TrainConfig.from_dict(raw.get("train") or {}),
        data=DataConfig.from_dict(raw.get("data") or {}),
        repeats=raw.get("repeats", 1),
        workers=raw.get("workers", 1),
    )


def apply_overrides(
    config: RunConfig, seed: int | None = None, workers: int | None = None
) -> RunConfig:
    """Fold command-line flags into a loaded config; flags win."""
    if seed is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, seed=seed)
        )
    if workers is not None:
        config = dataclasses.replace(config, workers=workers)
    return config


def write_resolved(config: RunConfig, out_dir: str | Path) -> Path:
    """Echo the fully resolved config next to the run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(yaml.safe_dump(config.as_dict(), sort_keys=False))
    return path
