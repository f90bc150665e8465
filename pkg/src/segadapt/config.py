"""Experiment configuration: schema, validation, defaults, and YAML IO.

A config file has four sections (``dataset``, ``model``, ``training``,
``output``), each optional; omitted fields take the documented dataclass
defaults, so an empty file is a complete experiment. Unknown keys anywhere
are rejected rather than ignored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .data import DatasetBundle, DomainSpec, SplitPlan, make_splits
from .networks import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    """Benchmark recipe: two domain specs plus the split plan.

    The default target domain differs from the source by a 90-degree palette
    hue rotation, which is the domain gap the adaptation modes must close.
    Both domains render with wide per-shape hue jitter (hue never identifies
    the class) and the target's class distribution is skewed so a small
    labeled budget undersamples the rare class.
    """

    resolution: tuple = (48, 48)
    source: DomainSpec = field(
        default_factory=lambda: DomainSpec(hue_jitter=1.9, noise_sigma=0.10)
    )
    target: DomainSpec = field(
        default_factory=lambda: DomainSpec(
            palette_hue_shift=float(np.pi / 2),
            hue_jitter=1.9,
            noise_sigma=0.10,
            class_frequency=(0.0, 0.45, 0.45, 0.10),
            seed=1,
        )
    )
    plan: SplitPlan = field(default_factory=SplitPlan)
    path: Optional[str] = None  # None -> content-addressed dir under the run root

    def __post_init__(self):
        res = tuple(int(v) for v in self.resolution)
        if len(res) != 2 or res[0] < 16 or res[1] < 16:
            raise ValueError(f"resolution must be (H, W) with H, W >= 16, got {self.resolution}")
        object.__setattr__(self, "resolution", res)
        if self.source.num_classes != self.target.num_classes:
            raise ValueError("source and target palettes must have the same number of classes")

    @property
    def num_classes(self) -> int:
        return self.source.num_classes


@dataclass(frozen=True)
class OutputConfig:
    run_dir: Optional[str] = None
    save_predictions: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _build_section(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: Optional[dict]) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - {"dataset", "model", "training", "output"})
    if unknown:
        raise ConfigError(f"unknown top-level section(s) {unknown}")
    dataset_data = dict(data.get("dataset") or {})
    for key, cls in (("source", DomainSpec), ("target", DomainSpec), ("plan", SplitPlan)):
        if key in dataset_data:
            dataset_data[key] = _build_section(cls, dataset_data[key], f"dataset.{key}")
    return ExperimentConfig(
        dataset=_build_section(DatasetConfig, dataset_data, "dataset"),
        model=_build_section(ModelConfig, data.get("model"), "model"),
        training=_build_section(TrainConfig, data.get("training"), "training"),
        output=_build_section(OutputConfig, data.get("output"), "output"),
    )


def _plain(value):
    """Recursively turn tuples into lists so YAML/JSON stay tag-free."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _plain(asdict(config))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=True)


def dataset_fingerprint(dataset: DatasetConfig) -> str:
    """Content hash of everything that determines the generated samples."""
    payload = _plain(asdict(dataset))
    payload.pop("path", None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def with_budget(config: ExperimentConfig, budget: int) -> ExperimentConfig:
    """Re-split the fixed target-train pool into ``budget`` labeled + rest unlabeled."""
    plan = config.dataset.plan
    pool = plan.n_target_labeled + plan.n_target_unlabeled
    if not 0 <= budget <= pool:
        raise ConfigError(f"budget {budget} outside the target-train pool size {pool}")
    new_plan = replace(plan, n_target_labeled=budget, n_target_unlabeled=pool - budget)
    return replace(config, dataset=replace(config.dataset, plan=new_plan))


def build_bundle(dataset: DatasetConfig) -> DatasetBundle:
    return make_splits(dataset.plan, dataset.source, dataset.target, dataset.resolution)
