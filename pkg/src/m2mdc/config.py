"""Run configuration: dataset, model and pipeline specs plus seed derivation."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .data import CIFAR10_MEAN, CIFAR10_STD, SYNTH_MEAN, SYNTH_STD, Dataset, ingest_cifar10, synth_dataset
from .ir import ArchGraph, resnet18, resnet34, tiny_resnet
from .kd import KDSchedule, TrainConfig

SUB_SEEDS = ("init", "probe", "augment", "shuffle")


class ConfigError(ValueError):
    pass


def sub_seed(seed: int, name: str) -> int:
    """Stable 32-bit seed for a named randomness consumer."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: Optional[str] = None
    seed: int = 0
    classes: int = 10
    train_samples: int = 1600
    eval_samples: int = 800
    noise: float = 0.35
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None

    def validate(self):
        if self.kind not in ("synthetic", "cifar10-binary"):
            raise ConfigError(f"dataset.kind: expected 'synthetic' or 'cifar10-binary', got {self.kind!r}")
        if self.kind == "cifar10-binary" and not self.path:
            raise ConfigError("dataset.path: required for cifar10-binary")
        if self.classes < 2:
            raise ConfigError("dataset.classes: need at least 2")
        if self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError("dataset.train_samples/eval_samples: must be positive")

    def load(self) -> tuple:
        if self.kind == "synthetic":
            mean, std = self.mean or SYNTH_MEAN, self.std or SYNTH_STD
            train = synth_dataset([self.seed, 1], self.classes, self.train_samples, self.noise, mean=mean, std=std,
                                  template_seed=self.seed)
            test = synth_dataset([self.seed, 2], self.classes, self.eval_samples, self.noise, mean=mean, std=std,
                                 template_seed=self.seed)
            return train, test
        mean, std = self.mean or CIFAR10_MEAN, self.std or CIFAR10_STD
        train = ingest_cifar10(self.path, "train", mean, std, limit=self.train_samples)
        test = ingest_cifar10(self.path, "test", mean, std, limit=self.eval_samples)
        return train, test


@dataclass
class ModelSpec:
    family: str = "tiny_resnet"
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: List[int] = field(default_factory=lambda: [2, 2, 2])
    classes: int = 10

    def validate(self):
        if self.family not in ("tiny_resnet", "resnet18", "resnet34"):
            raise ConfigError(f"model.family: unsupported {self.family!r}")
        if self.family == "tiny_resnet" and len(self.widths) != len(self.blocks):
            raise ConfigError("model.blocks: must have one entry per width")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("model.blocks: every stage needs at least one block")

    def build(self, seed: int) -> ArchGraph:
        if self.family == "resnet18":
            return resnet18(self.classes, seed=seed)
        if self.family == "resnet34":
            return resnet34(self.classes, seed=seed)
        return tiny_resnet(self.blocks, self.classes, self.widths, seed=seed)


@dataclass
class PipelineSpec:
    ratio: float = 0.25
    plane_fractions: Union[float, Dict[str, float]] = 0.5
    mid_fractions: Union[float, Dict[str, float]] = 0.5
    bins: int = 10
    probe_batch: int = 64
    probe_max: int = 5000
    kd: KDSchedule = field(default_factory=KDSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_checkpoint: Optional[str] = None

    def validate(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"pipeline.ratio: must be in [0, 1), got {self.ratio}")
        for name in ("plane_fractions", "mid_fractions"):
            v = getattr(self, name)
            vals = v.values() if isinstance(v, dict) else [v]
            if any(not 0.0 < f <= 1.0 for f in vals):
                raise ConfigError(f"pipeline.{name}: fractions must be in (0, 1]")
        if self.kd.alignment != "cosine":
            raise ConfigError(f"pipeline.kd.alignment: only 'cosine' is implemented, got {self.kd.alignment!r}")
        if self.bins < 2:
            raise ConfigError("pipeline.bins: must be >= 2")
        if self.probe_max < self.probe_batch:
            raise ConfigError("pipeline.probe_max: must be >= probe_batch")


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)
    out: str = "runs/default"
    seed: int = 42

    def validate(self) -> "RunConfig":
        self.dataset.validate()
        self.model.validate()
        self.pipeline.validate()
        if self.model.classes != self.dataset.classes:
            raise ConfigError(
                f"model.classes: head has {self.model.classes} classes, dataset has {self.dataset.classes}"
            )
        return self

    def seeds(self) -> Dict[str, int]:
        return {name: sub_seed(self.seed, name) for name in SUB_SEEDS}

    def train_config(self) -> TrainConfig:
        """The pipeline TrainConfig with batch-order and flip seeds filled in."""
        s = self.seeds()
        return dataclasses.replace(self.pipeline.train, seed=s["shuffle"], augment_seed=s["augment"])

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            d = json.load(fh)
        if "config" in d and "seeds" in d:  # a run manifest
            d = d["config"]
        return cls.from_dict(d)


_NESTED = {
    (RunConfig, "dataset"): DatasetSpec,
    (RunConfig, "model"): ModelSpec,
    (RunConfig, "pipeline"): PipelineSpec,
    (PipelineSpec, "kd"): KDSchedule,
    (PipelineSpec, "train"): TrainConfig,
}


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = [k for k in d if k not in names]
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        where = f"{path}.{k}" if path else k
        kwargs[k] = _build(sub, v, where) if sub is not None else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
