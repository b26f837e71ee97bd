from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from savc.schemas.enums import Benchmark, ChannelPermutation, FantasySetName

DEFAULT_TRAINABLE_LAYERS = ["encoder.layer4", "projector"]


class TransformDescriptor(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rotation: Literal[0, 90, 180, 270] = 0
    channel_permutation: ChannelPermutation = ChannelPermutation.RGB

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and self.channel_permutation == ChannelPermutation.RGB


class SyntheticConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_classes: int = Field(default=10, ge=2)
    incremental_sessions: int = Field(default=2, ge=0)
    ways: int = Field(default=2, ge=1)
    shots: int = Field(default=5, ge=1)
    train_per_class: int = Field(default=50, ge=1)
    test_per_class: int = Field(default=20, ge=1)
    resolution: int = 32
    noise: float = Field(default=0.04, ge=0.0)
    seed: int = 7

    @model_validator(mode="after")
    def validate_shots(self) -> "SyntheticConfig":
        if self.shots > self.train_per_class:
            raise ValueError("shots must be <= train_per_class")
        return self


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.2, ge=0.0)
    beta: float = Field(default=0.8, ge=0.0)
    tau: float = Field(default=0.07, gt=0.0)


class ContrastConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    queue_length: int = Field(default=4096, gt=0)
    key_momentum: float = Field(default=0.999, ge=0.0, le=1.0)
    freeze_queue_during_finetune: bool = False


class AugmentationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    global_scale: tuple[float, float] = (0.2, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    aspect_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    local_resolution: int | None = None
    flip_p: float = Field(default=0.5, ge=0.0, le=1.0)
    jitter_p: float = Field(default=0.8, ge=0.0, le=1.0)
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    grayscale_p: float = Field(default=0.2, ge=0.0, le=1.0)
    n_local: int = Field(default=2, ge=0)
    overlap_threshold: float = Field(default=0.3, ge=0.0, le=1.0)
    max_overlap_retries: int = Field(default=50, ge=1)

    @field_validator("global_scale", "local_scale", "aspect_ratio")
    @classmethod
    def validate_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if low <= 0 or high < low:
            raise ValueError("range must satisfy 0 < low <= high")
        return value

    @field_validator("global_scale", "local_scale")
    @classmethod
    def validate_scale(cls, value: tuple[float, float]) -> tuple[float, float]:
        if value[1] > 1.0:
            raise ValueError("crop scale must be <= 1.0")
        return value


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    architecture: str = "small_conv"
    feature_dim: int = Field(default=128, gt=0)
    projection_dim: int = Field(default=128, gt=0)

    @field_validator("feature_dim")
    @classmethod
    def validate_feature_dim(cls, value: int) -> int:
        if value % 4 != 0:
            raise ValueError("feature_dim must be divisible by 4")
        return value


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optimizer_momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    base_lr: float = Field(default=0.1, gt=0.0)
    incremental_lr: float | None = Field(default=None, gt=0.0)
    base_epochs: int = Field(default=30, ge=1)
    incremental_epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=64, ge=1)
    trainable_layers: list[str] = Field(default_factory=lambda: DEFAULT_TRAINABLE_LAYERS.copy())
    finetune_logit_scale: float = Field(default=16.0, gt=0.0)
    recompute_old_prototypes: bool = False
    normalize_prototype_features: bool = False
    eval_batch_size: int = Field(default=256, ge=1)

    @property
    def effective_incremental_lr(self) -> float:
        return self.incremental_lr if self.incremental_lr is not None else self.base_lr / 10.0


class AblationToggles(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scl: bool = True
    fantasy: bool = True
    multicrop: bool = True
    finetune: bool = True


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fantasy_space: bool = False


class BaselineAccuracies(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    accuracies: list[float] = Field(min_length=1)


class ReportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    baseline: BaselineAccuracies | None = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="savc", min_length=1)
    benchmark: Benchmark = Benchmark.SYNTHETIC
    dataset_root: Path | None = None
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    fantasy: FantasySetName | list[TransformDescriptor] = FantasySetName.TWO_FOLD_ROTATIONS
    loss: LossWeights = Field(default_factory=LossWeights)
    contrast: ContrastConfig = Field(default_factory=ContrastConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    toggles: AblationToggles = Field(default_factory=AblationToggles)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    seed: int = Field(default=0, ge=0)
    output_dir: Path | None = None

    @field_validator("fantasy")
    @classmethod
    def validate_fantasy(
        cls, value: FantasySetName | list[TransformDescriptor]
    ) -> FantasySetName | list[TransformDescriptor]:
        if value == FantasySetName.CUSTOM:
            raise ValueError("custom fantasy sets are given as an explicit descriptor list")
        if isinstance(value, list):
            if not value:
                raise ValueError("fantasy descriptor list must not be empty")
            if not value[0].is_identity:
                raise ValueError("the first fantasy descriptor must be the identity")
        return value
