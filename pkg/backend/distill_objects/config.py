"""
Configuration models for the distillation pipeline.

Every knob of the pipeline lives in one of the pydantic models below, and `TrainConfig`
nests the sectioned ones so a whole run is described by a single JSON document
(see `parameters.json` at the repository root for the defaults:
lambda_u = 2, EMA decay 0.9996, class threshold
0.7, size threshold 5, Dice weight 5, class weight 1, batch 16, lr 1e-4, weight decay 0.05).

Validators enforce the invariants the rest of the code relies on, so a config object that
exists is a config object that can be used.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .enums import AugmentMode, EmptyPseudoPolicy, EvalModel, Strategy
from .errors import ConfigError

logger = logging.getLogger(__name__)

# Shape kinds the scene generator knows how to rasterise
SHAPE_KINDS = ("circle", "rectangle", "triangle", "diamond")


class SceneConfig(BaseModel):
    """
    Describes how synthetic scenes are drawn.

    image_size is (H, W); instance_range and size_range are inclusive ranges, the latter in
    pixels of the shape's bounding extent.
    """

    model_config = ConfigDict(frozen=True)

    image_size: Tuple[int, int] = (128, 128)
    class_names: List[str] = Field(default_factory=lambda: ["circle", "rectangle", "triangle"])
    instance_range: Tuple[int, int] = (1, 6)
    size_range: Tuple[int, int] = (14, 44)
    allow_occlusion: bool = True
    background_noise: float = Field(default=0.03, ge=0.0, le=0.5)

    @field_validator("image_size")
    @classmethod
    def _check_image_size(cls, value):
        if min(value) < 32:
            raise ValueError(f"image size must be at least 32x32, got {value}")
        return value

    @field_validator("class_names")
    @classmethod
    def _check_class_names(cls, value):
        if not value:
            raise ValueError("at least one shape class is required")
        unknown = [name for name in value if name not in SHAPE_KINDS]
        if unknown:
            raise ValueError(f"unsupported shape classes {unknown}; choose from {SHAPE_KINDS}")
        if len(set(value)) != len(value):
            raise ValueError("class names must be unique")
        return value

    @field_validator("instance_range")
    @classmethod
    def _check_instance_range(cls, value):
        low, high = value
        if high < 1:
            raise ValueError("instance range must allow at least one instance")
        if low < 0 or low > high:
            raise ValueError(f"invalid instance range {value}")
        return value

    @model_validator(mode="after")
    def _check_size_range(self):
        low, high = self.size_range
        if low < 4 or low > high or high > min(self.image_size):
            raise ValueError(f"invalid size range {self.size_range} for image {self.image_size}")
        return self


class ModelConfig(BaseModel):
    """Architecture of the query-based mask classifier."""

    model_config = ConfigDict(frozen=True)

    num_queries: int = Field(default=20, ge=1)
    num_classes: int = Field(default=3, ge=1)
    backbone_widths: Tuple[int, int, int, int] = (32, 64, 128, 128)
    hidden_dim: int = Field(default=64, ge=8)
    num_heads: int = Field(default=4, ge=1)
    ffn_dim: int = Field(default=128, ge=8)
    decoder_layers: int = Field(default=2, ge=1)
    aux_layers: int = Field(default=1, ge=0)
    output_stride: int = 4

    @field_validator("output_stride")
    @classmethod
    def _check_stride(cls, value):
        if value not in (1, 2, 4):
            raise ValueError(f"output stride must be 1, 2 or 4, got {value}")
        return value

    @model_validator(mode="after")
    def _check_layers(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be a multiple of 4 for the 2D position encoding")
        if self.aux_layers > self.decoder_layers - 1:
            raise ValueError("aux_layers must be smaller than decoder_layers")
        return self

    def fingerprint(self) -> str:
        """Hash of the canonical config; equal fingerprints mean copy/EMA-compatible params."""

        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class AugmentConfig(BaseModel):
    """Magnitudes and probabilities of the weak, strong and cutout augmentations."""

    model_config = ConfigDict(frozen=True)

    mode: AugmentMode = AugmentMode.OURS
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    min_crop: int = Field(default=16, ge=16)
    hflip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    brightness: Tuple[float, float] = (0.6, 1.4)
    contrast: Tuple[float, float] = (0.6, 1.4)
    saturation: Tuple[float, float] = (0.6, 1.4)
    hue: Tuple[float, float] = (-0.1, 0.1)
    grayscale_prob: float = Field(default=0.2, ge=0.0, le=1.0)
    blur_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    cutout_count: Tuple[int, int] = (1, 5)
    cutout_area: Tuple[float, float] = (0.02, 0.10)
    cutout_aspect: Tuple[float, float] = (0.5, 2.0)

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("crop_scale", "brightness", "contrast", "saturation", "hue",
                     "blur_sigma", "cutout_count", "cutout_area", "cutout_aspect"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name}: lower bound {low} exceeds upper bound {high}")
        if not 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ValueError("crop_scale must lie in (0, 1]")
        if self.hue[0] < -0.5 or self.hue[1] > 0.5:
            raise ValueError("hue shift must lie in [-0.5, 0.5]")
        if self.brightness[0] < 0 or self.contrast[0] < 0 or self.saturation[0] < 0:
            raise ValueError("jitter factors must be non-negative")
        if self.blur_sigma[0] <= 0:
            raise ValueError("blur sigma must be positive")
        if self.cutout_count[0] < 0 or not 0.0 < self.cutout_area[1] <= 1.0 or self.cutout_area[0] < 0:
            raise ValueError("invalid cutout settings")
        if self.cutout_aspect[0] <= 0:
            raise ValueError("cutout aspect must be positive")
        return self


class FilterConfig(BaseModel):
    """
    Pseudo-label thresholds.

    alpha_S is a soft foreground mass measured at prediction resolution (stride s), so it
    depends on the model's output stride.
    """

    model_config = ConfigDict(frozen=True)

    alpha_C: float = Field(default=0.7, gt=0.0, le=1.0)
    alpha_S: float = Field(default=5.0, ge=0.0)


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_D: float = Field(default=5.0, ge=0.0)
    lambda_C: float = Field(default=1.0, ge=0.0)
    eos_coef: float = Field(default=0.1, ge=0.0)


class PointConfig(BaseModel):
    """Importance sampling of mask points; full_pixel switches sampling off."""

    model_config = ConfigDict(frozen=True)

    n_points: int = Field(default=1024, ge=1)
    oversample_ratio: float = Field(default=3.0, ge=1.0)
    importance_fraction: float = Field(default=0.75, ge=0.0, le=1.0)
    full_pixel: bool = False


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    interval: int = Field(default=500, ge=1)
    batch_size: int = Field(default=16, ge=1)
    score_floor: float = Field(default=0.05, ge=0.0, le=1.0)
    model: EvalModel = EvalModel.STUDENT
    max_images: Optional[int] = Field(default=None, ge=1)


class TrainConfig(BaseModel):
    """
    All protocol hyper-parameters of one training run.

    burn_in_iters = None means "use the proportional rule" (see resolve_burn_in);
    teacher_iters = None means "same budget as the burn-in".
    """

    model_config = ConfigDict(frozen=True)

    strategy: Strategy = Strategy.GUIDED
    lambda_u: float = Field(default=2.0, ge=0.0)
    ema_alpha: float = Field(default=0.9996, ge=0.0, le=1.0)
    batch_size: int = Field(default=16, ge=2)
    unsup_batch_ratio: float = Field(default=0.5, gt=0.0, lt=1.0)
    total_iters: int = Field(default=6000, ge=0)
    burn_in_iters: Optional[int] = Field(default=None, ge=0)
    teacher_iters: Optional[int] = Field(default=None, ge=0)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    backbone_lr_multiplier: float = Field(default=1.0, ge=0.0)
    seed: int = 0
    empty_pseudo_policy: EmptyPseudoPolicy = EmptyPseudoPolicy.SKIP
    divergence_patience: int = Field(default=3, ge=1)
    log_interval: int = Field(default=20, ge=1)
    ckpt_interval: int = Field(default=500, ge=1)
    device: str = "auto"
    deterministic: bool = False
    progress_bar: bool = True

    model: ModelConfig = Field(default_factory=ModelConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    points: PointConfig = Field(default_factory=PointConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("device")
    @classmethod
    def _check_device(cls, value):
        if value not in ("auto", "cpu", "cuda") and not value.startswith("cuda:"):
            raise ValueError(f"unknown device {value!r}")
        return value

    @model_validator(mode="after")
    def _check_budget(self):
        if self.burn_in_iters is not None and self.burn_in_iters > self.total_iters:
            raise ValueError(
                f"burn_in_iters ({self.burn_in_iters}) exceeds total_iters ({self.total_iters})"
            )
        return self

    @property
    def labeled_per_step(self) -> int:
        """Labeled images per step; the rest of the batch is unlabeled."""

        return max(1, min(self.batch_size - 1, round(self.batch_size * (1.0 - self.unsup_batch_ratio))))

    @property
    def unlabeled_per_step(self) -> int:
        return self.batch_size - self.labeled_per_step

    def resolve_burn_in(self, labeled_fraction: float) -> int:
        """
        Burn-in length for a given labeled fraction.

        The burn-in grows with the share of labeled images: 10% labels give ~30% of the
        iteration budget, capped at the whole budget.

        Parameters:
            labeled_fraction (float): Fraction of the training split that is labeled.

        Returns:
            int: Number of burn-in iterations.
        """

        if self.burn_in_iters is not None:
            return self.burn_in_iters

        proportional = round(0.3 * self.total_iters * labeled_fraction / 0.1)

        return int(min(self.total_iters, max(0, proportional)))

    def resolve_teacher_iters(self, burn_in: int) -> int:
        return burn_in if self.teacher_iters is None else self.teacher_iters


class ExperimentSpec(BaseModel):
    """One named experiment: a config file, a dataset and the seeds to run it with."""

    name: str
    config_path: Optional[Path] = None
    dataset_path: Path
    seeds: List[int]
    output_dir: Path

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, value):
        if not value:
            raise ValueError("at least one seed is required")
        if len(set(value)) != len(value):
            raise ValueError("seeds must be unique so every run gets its own output directory")
        return value

    def run_dir(self, seed: int) -> Path:
        return self.output_dir / self.name / str(seed)


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """
    Recursively merges overrides into a copy of base; nested dicts are merged, anything
    else is replaced.
    """

    merged = dict(base)

    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value

    return merged


def load_train_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """
    Builds a TrainConfig from an optional JSON document plus command-line overrides.

    Parameters:
        path (Path | None): JSON file with TrainConfig fields and sections, or None for defaults.
        overrides (dict | None): Values merged over the file (nested dicts for sections).

    Returns:
        TrainConfig: The validated configuration.

    Raises:
        ConfigError: If the file cannot be parsed or a value breaks an invariant.
    """

    data: Dict[str, Any] = {}

    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    data = deep_merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        config = TrainConfig.model_validate(data)
    except ValidationError as exc:
        source = path if path is not None else "<overrides>"
        raise ConfigError(f"invalid config {source}: {exc}") from exc

    logger.debug("Loaded train config from %s", path)

    return config


def save_train_config(config: TrainConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(config.model_dump(mode="json"), indent=2))
