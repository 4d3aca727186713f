"""YAML run configuration with strict schema validation."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import DomainError, SpecError
from .estimators import TrainConfig
from .policy import MappingFn, PolicyConfig, SamplingStrategy
from .synthetic import DatasetSpec, load_clips, make_dataset


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetModel(_Strict):
    """Either a generated dataset or a path to a saved clip archive."""

    split: Literal["train", "eval"] = "eval"
    path: Optional[str] = None
    clips: int = Field(36, ge=1)
    frames: int = Field(30, ge=2)
    speed: Literal["slow", "medium", "fast", "any", "mixed"] = "mixed"
    shape: tuple[int, int, int] = (16, 6, 6)
    num_classes: int = Field(10, ge=1)
    frame_size: tuple[float, float] = (320.0, 240.0)
    box_side: tuple[float, float] = (0.25, 0.4)
    base_noise: float = Field(0.05, ge=0.0)
    motion_gain: float = Field(3.0, ge=0.0)
    motion_radius: int = Field(10, ge=1)
    world_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if min(self.shape) < 1:
            raise ValueError("shape entries must be >= 1")
        lo, hi = self.box_side
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("box_side must satisfy 0 < lo <= hi <= 1")
        return self

    def spec(self) -> DatasetSpec:
        fields = self.model_dump(exclude={"split", "path"})
        return DatasetSpec(**fields)


class PolicyModel(_Strict):
    name: str = ""
    mode: Literal["fixed", "vanilla", "deformable"] = "fixed"
    k: int = Field(30, ge=1)
    theta: int = Field(3, ge=1)
    thresholds: Optional[list[float]] = None
    mapping: Literal["linear", "sqrt", "quadratic", "learnable"] = "linear"
    strategy: Literal["nearest", "furthest", "bin", "random"] = "nearest"
    seed: int = Field(0, ge=0)

    def build(self, learned: MappingFn | None = None) -> PolicyConfig:
        if self.mapping == "learnable":
            if learned is None:
                raise SpecError(f"policy {self.name or self.mode!r} uses a learnable mapping but none is trained")
            mapping = learned
        else:
            mapping = MappingFn(self.mapping)
        thresholds = tuple(self.thresholds) if self.thresholds is not None else None
        return PolicyConfig(
            self.mode, self.k, self.theta, thresholds, mapping, SamplingStrategy(self.strategy, self.seed), self.name
        )


class TrainModel(_Strict):
    lr: float = Field(0.05, gt=0.0)
    steps: int = Field(300, ge=1)
    batch_size: int = Field(16, ge=1)
    lambda_mot: float = Field(1.0, ge=0.0)
    lambda_size: float = Field(1.0, ge=0.0)
    lambda_dst: float = Field(1.0, ge=0.0)
    k: int = Field(30, ge=2)
    distill: Literal["fixed", "vanilla", "deformable"] = "deformable"
    student_k: int = Field(4, ge=1)
    strategy: Literal["nearest", "furthest", "bin", "random"] = "nearest"
    mapping_steps: int = Field(300, ge=0)
    mapping_lr: float = Field(0.05, gt=0.0)
    mapping_budget_weight: float = Field(0.5, ge=0.0)

    def build(self, seed: int) -> TrainConfig:
        fields = self.model_dump(exclude={"mapping_steps", "mapping_lr", "mapping_budget_weight"})
        return TrainConfig(seed=seed, **fields)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "out"
    formats: list[Literal["csv", "plot"]] = ["csv"]
    workers: int = Field(1, ge=1)
    timing: bool = False
    oracle: bool = False
    repeats: int = Field(1, ge=1)
    checkpoint: Optional[str] = None
    datasets: list[DatasetModel] = Field(default_factory=lambda: [DatasetModel(split="train"), DatasetModel()])
    policies: list[PolicyModel] = Field(min_length=1)
    train: TrainModel = TrainModel()

    def split(self, name: str) -> list[DatasetModel]:
        return [d for d in self.datasets if d.split == name]


def format_validation_error(err: ValidationError) -> tuple[str, str]:
    """``(field_path, message)`` for the first schema violation."""
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"]) or "<root>"
    return path, first["msg"]


class ConfigError(SpecError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def parse_config(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(*format_validation_error(err)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"config file {str(path)!r} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError("<file>", f"invalid YAML: {err}") from None
    return parse_config(data)


def dataset_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 7919, index]).generate_state(1)[0])


def build_split(cfg: RunConfig, split: str, seed: int | None = None) -> list:
    """Generate or load every clip of one split, in config order."""
    seed = cfg.seed if seed is None else seed
    clips = []
    for i, d in enumerate(cfg.datasets):
        if d.split != split:
            continue
        if d.path is not None:
            clips.extend(load_clips(d.path))
        else:
            clips.extend(make_dataset(d.spec(), dataset_seed(seed, i)))
    if not clips:
        raise DomainError(f"config has no {split!r} dataset")
    return clips
