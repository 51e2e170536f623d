"""Run configuration: one JSON document drives every subcommand.

Sections mirror the modules; unknown keys are rejected and every section is
converted to its module's dataclass eagerly so bad values fail before any
work starts.
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .data_model import SplitSpec
from .errors import ConfigError, TlbenchError
from .modelzoo import BackboneSpec, HeadConfig, ModelSpec, OptimizerSpec
from .pipeline.augment import AugmentationPolicy
from .pipeline.batching import BatchingConfig
from .synth import DEFAULT_COUNTRIES, SynthConfig
from .trainer import TrainConfig
from .tuner import SearchSpace

STAGING_ENV = "TLBENCH_STAGING_DIR"


def subcommand_seed(seed: int, name: str) -> int:
    """Child seed for subcommand ``name`` derived from the top-level seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Section):
    n: int = Field(2000, ge=1)
    image_size: int = Field(64, ge=8)
    positive_fraction: float = Field(0.55, ge=0.0, le=1.0)
    countries: dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_COUNTRIES))
    age_mean: float = 48.0
    age_std: float = Field(18.0, ge=0.0)
    missing_age: float = Field(0.1, ge=0.0, le=1.0)
    missing_sex: float = Field(0.1, ge=0.0, le=1.0)
    female_fraction: float = Field(0.6, ge=0.0, le=1.0)
    noise_level: float = Field(0.1, ge=0.0)
    seed: Optional[int] = None  # None: derived from the top-level seed


class SplitSection(_Section):
    fractions: tuple[float, float, float] = (0.8, 0.2, 0.0)
    strata_keys: tuple[str, ...] = ("label", "age_group")


class DataSection(_Section):
    manifest: Optional[str] = None  # None: the synth subcommand's manifest
    imputation: Literal["country_median", "country_mean"] = "country_median"
    min_country_count: int = Field(100, ge=0)
    caps: dict[str, int] = Field(default_factory=dict)
    split: SplitSection = Field(default_factory=SplitSection)


class BatchingSection(_Section):
    batch_size: int = Field(128, ge=1)
    shuffle_buffer: int = Field(10_000, ge=1)
    cache: bool = True


class AugmentationSection(_Section):
    horizontal_flip: bool = True
    rotation_degrees: float = Field(15.0, ge=0.0)
    zoom_fraction: float = Field(0.10, ge=0.0)
    contrast_fraction: float = Field(0.10, ge=0.0)
    translation_fraction: float = Field(0.05, ge=0.0)


class BalancingSection(_Section):
    enabled: bool = False
    targets: dict[str, int] = Field(default_factory=dict)
    allow_downsample: bool = False


class PipelineSection(_Section):
    image_size: tuple[int, int] = (224, 224)
    batching: BatchingSection = Field(default_factory=BatchingSection)
    augmentation: AugmentationSection = Field(default_factory=AugmentationSection)
    balancing: BalancingSection = Field(default_factory=BalancingSection)


class HeadSection(_Section):
    dropout_rate: float = 0.3
    dense_units: int = 128
    l2_strength: float = 1e-4
    num_classes: int = 2


class OptimizerSection(_Section):
    family: str = "adam_decoupled_wd"
    learning_rate: float = 5e-5
    weight_decay: float = 1e-5


class ModelSection(_Section):
    backbone: str = "SyntheticTiny"
    pretrained: bool = False
    head: HeadSection = Field(default_factory=HeadSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    freeze_rate: float = Field(0.2, ge=0.0, le=1.0)
    frozen_bn_inference: bool = True


class TrainSection(_Section):
    max_epochs: int = Field(30, ge=1)
    early_stop_patience: int = Field(3, ge=1)
    early_stop_restore_best: bool = True
    lr_reduce_factor: float = 0.5
    lr_reduce_patience: int = Field(2, ge=1)
    min_lr: float = Field(1e-7, ge=0.0)
    keep_checkpoints: Optional[int] = Field(5, ge=1)
    bn_recalibration: bool = False
    threads: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = None  # None: derived from the top-level seed


class TuneSection(_Section):
    dropout_rate: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5)
    dense_units: tuple[int, ...] = (32, 64, 128, 256, 512)
    learning_rate: tuple[float, ...] = (1e-5, 5e-5, 1e-4)
    weight_decay: tuple[float, ...] = (1e-5, 1e-4)
    freeze_rate: tuple[float, ...] = (0.01, 0.05, 0.10, 0.20, 0.50, 0.75)
    optimizer: tuple[str, ...] = ("sgd", "rmsprop", "adam", "nadam", "adam_decoupled_wd")
    continuous: bool = True
    learning_rate_range: tuple[float, float] = (1e-5, 1e-3)
    weight_decay_range: tuple[float, float] = (1e-5, 1e-4)
    eta: int = Field(3, ge=2)
    max_epochs: int = Field(30, ge=1)
    workers: int = Field(1, ge=1)


class EvalSection(_Section):
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    split: Literal["train", "val", "test"] = "test"
    model_name: Optional[str] = None  # None: the backbone name
    plots: bool = True


class ExplainSection(_Section):
    split: Literal["train", "val", "test"] = "test"
    num_images: int = Field(8, ge=1)
    alpha: float = Field(0.4, ge=0.0, le=1.0)
    layer: Optional[str] = None
    cmap: str = "jet"


class RunConfig(_Section):
    seed: int = 42
    out: str = "runs"
    synth: SynthSection = Field(default_factory=SynthSection)
    data: DataSection = Field(default_factory=DataSection)
    pipeline: PipelineSection = Field(default_factory=PipelineSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    tune: TuneSection = Field(default_factory=TuneSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    explain: ExplainSection = Field(default_factory=ExplainSection)

    # -- conversion to module types -------------------------------------

    def synth_config(self) -> SynthConfig:
        s = self.synth
        fields = s.model_dump(exclude={"seed"})
        seed = s.seed if s.seed is not None else subcommand_seed(self.seed, "synth")
        return SynthConfig(**fields, seed=seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            fractions=tuple(self.data.split.fractions),
            strata_keys=tuple(self.data.split.strata_keys),
            seed=subcommand_seed(self.seed, "curate"),
        )

    def augmentation_policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            **self.pipeline.augmentation.model_dump(), seed=subcommand_seed(self.seed, "augment")
        )

    def train_seed(self) -> int:
        if self.train.seed is not None:
            return self.train.seed
        return subcommand_seed(self.seed, "train")

    def batching_config(self) -> BatchingConfig:
        return BatchingConfig(**self.pipeline.batching.model_dump(), seed=self.train_seed())

    def model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(
            backbone=BackboneSpec(m.backbone, m.pretrained),
            head=HeadConfig(**m.head.model_dump()),
            optimizer=OptimizerSpec(**m.optimizer.model_dump()),
            freeze_rate=m.freeze_rate,
            input_size=tuple(self.pipeline.image_size),
            frozen_bn_inference=m.frozen_bn_inference,
        )

    def train_config(self, checkpoint_dir: str | Path | None = None) -> TrainConfig:
        fields = self.train.model_dump(exclude={"threads", "seed"})
        return TrainConfig(
            **fields,
            checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
            seed=self.train_seed(),
        )

    def search_space(self) -> SearchSpace:
        fields = self.tune.model_dump(exclude={"eta", "max_epochs", "workers"})
        return SearchSpace(**{k: tuple(v) for k, v in fields.items() if k != "continuous"},
                           continuous=self.tune.continuous)

    def validate_sections(self) -> "RunConfig":
        """Build every module type once so invalid values surface immediately."""
        if self.pipeline.balancing.enabled and not self.pipeline.balancing.targets:
            raise ConfigError("balancing is enabled but no per-label targets are set")
        try:
            self.synth_config()
            self.split_spec()
            self.augmentation_policy()
            self.batching_config()
            self.model_spec()
            self.train_config()
            self.search_space()
        except (TlbenchError, ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return self

    # -- serialization --------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            config = cls.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigError(f"invalid configuration:\n{exc}") from None
        return config.validate_sections()


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_json(text)


def save_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_json())
    return path
