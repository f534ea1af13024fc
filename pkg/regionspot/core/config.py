"""
regionspot/core/config.py - Toolkit Configuration

Process settings come from the environment (Pydantic Settings); run settings come
from a JSON document validated into RunConfig, optionally layered over a named preset.
"""

import copy
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from regionspot.core.exceptions import ConfigValidationError
from regionspot.models.encoders import EncoderSpec, SourceTap
from regionspot.models.fusion import FusionConfig

DEFAULT_TEMPLATE = "a photo of {} in the scene"


class Settings(BaseSettings):
    """
    Process settings loaded from environment variables.
    All settings can be overridden via .env file or environment.
    """

    # ===========================================
    # Application Settings
    # ===========================================
    APP_NAME: str = Field(default="regionspot", description="Application name")
    APP_VERSION: str = Field(default="1.0.0", description="Application version")
    ENVIRONMENT: str = Field(default="development", description="Environment: development, production")

    # ===========================================
    # Logging
    # ===========================================
    LOG_LEVEL: str = Field(default="INFO", description="Root log level")
    LOG_JSON: bool = Field(default=False, description="Emit JSON logs on the console")

    # ===========================================
    # Parallelism
    # ===========================================
    NUM_WORKERS: int = Field(default=1, ge=1, description="Worker threads for image loading and evaluation")

    @property
    def json_logs(self) -> bool:
        """Production always logs JSON."""
        return self.LOG_JSON or self.ENVIRONMENT == "production"

    model_config = SettingsConfigDict(
        env_prefix="REGIONSPOT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.
    Uses lru_cache to avoid re-reading environment on every call.
    """
    return Settings()


# =============================================================================
# RUN CONFIGURATION MODELS
# =============================================================================

class StrictModel(BaseModel):
    """Base for run-config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class AlignmentConfig(StrictModel):
    """Region-text scoring and focal-loss settings."""

    temperature_init: float = Field(default=14.3, gt=0, description="Initial logit scale (about 1/0.07)")
    learn_temperature: bool = Field(default=True, description="Optimize the logit scale with the fusion head")
    focal_alpha: float = Field(default=0.25, gt=0, lt=1, description="Focal loss positive-class weight")
    focal_gamma: float = Field(default=2.0, ge=0, description="Focal loss focusing exponent")
    template: str = Field(default=DEFAULT_TEMPLATE, description="Prompt template with one {} placeholder")
    use_text_prompt: bool = Field(default=True, description="Wrap names in the template; false encodes bare names")
    top_k: int = Field(default=5, ge=1, description="Ranked categories kept per region")

    @property
    def effective_template(self) -> str:
        return self.template if self.use_text_prompt else "{}"


class SyntheticSource(StrictModel):
    """Parameters of a generated shapes dataset."""

    num_images: int = Field(default=4, ge=1)
    regions_per_image: int = Field(default=3, ge=1)
    categories: List[str] = Field(default_factory=lambda: ["red block", "green block", "blue block"])
    image_size: int = Field(default=64, ge=8)
    seed: int = 0


class DatasetSource(StrictModel):
    """Either a COCO-style annotation file or a synthetic generator."""

    annotations: Optional[Path] = None
    image_root: Optional[Path] = None
    synthetic: Optional[SyntheticSource] = None

    @model_validator(mode="after")
    def _one_source(self) -> "DatasetSource":
        if (self.annotations is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'annotations' or 'synthetic' must be set")
        return self


class StageConfig(StrictModel):
    """One training stage: datasets mixed uniformly, fixed iteration count."""

    datasets: List[str] = Field(..., min_length=1)
    iterations: int = Field(..., ge=0)


class TrainConfig(StrictModel):
    """Optimizer, schedule and stage layout."""

    stages: List[StageConfig] = Field(..., min_length=1)
    base_lr: float = Field(default=2.5e-5, ge=0, description="AdamW learning rate at iteration 0 of a stage")
    lr_decay_points: Optional[List[int]] = Field(
        default=None, description="Stage-relative iterations where the lr is multiplied by decay_factor"
    )
    decay_fractions: Tuple[float, ...] = Field(
        default=(0.7, 0.9), description="Used when lr_decay_points is omitted"
    )
    decay_factor: float = Field(default=0.1, gt=0, le=1)
    batch_size: int = Field(default=16, ge=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    negative_boxes: int = Field(default=0, ge=0, description="Random background boxes added per image")
    seed: int = 0
    eval_every: int = Field(default=0, ge=0, description="Checkpoint interval in iterations; 0 disables")

    @field_validator("decay_fractions")
    @classmethod
    def _fractions_in_range(cls, value):
        if any(not 0 < f < 1 for f in value) or list(value) != sorted(value):
            raise ValueError("decay fractions must be increasing and inside (0, 1)")
        return value

    @model_validator(mode="after")
    def _decay_points_fit(self) -> "TrainConfig":
        points = self.lr_decay_points
        if points is None:
            return self
        if any(b <= a for a, b in zip(points, points[1:])):
            raise ValueError("lr_decay_points must be strictly increasing")
        for index, stage in enumerate(self.stages):
            if points and points[-1] >= stage.iterations:
                raise ValueError(
                    f"lr_decay_points must be < iterations of stage {index} ({stage.iterations})"
                )
        return self

    def decay_points_for(self, stage: StageConfig) -> List[int]:
        """Stage-relative decay milestones."""
        if self.lr_decay_points is not None:
            return list(self.lr_decay_points)
        points = sorted({int(f * stage.iterations) for f in self.decay_fractions})
        return [p for p in points if 0 < p < stage.iterations]


class EvalOptions(StrictModel):
    """Evaluation protocol options."""

    mode: Literal["fixed_box", "detection"] = "fixed_box"
    rare_threshold: int = Field(default=10, ge=1, description="Categories with fewer training instances are rare")
    common_threshold: int = Field(default=100, ge=1, description="Categories with fewer instances are common")
    iou_threshold: float = Field(default=0.5, gt=0, le=1)

    @model_validator(mode="after")
    def _thresholds_ordered(self) -> "EvalOptions":
        if self.common_threshold <= self.rare_threshold:
            raise ValueError("common_threshold must exceed rare_threshold")
        return self


class RunConfig(StrictModel):
    """Merged view of every section a command needs."""

    preset: Optional[str] = None
    seed: int = 0
    encoder: EncoderSpec
    source_tap: SourceTap = SourceTap.TRANSFORMER_DECODER
    fusion: FusionConfig
    alignment: AlignmentConfig = Field(default_factory=AlignmentConfig)
    train: TrainConfig
    eval: EvalOptions = Field(default_factory=EvalOptions)
    datasets: Dict[str, DatasetSource] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _cross_section_checks(self) -> "RunConfig":
        if self.fusion.c_dim != self.encoder.d_vil:
            raise ValueError(
                f"fusion.c_dim ({self.fusion.c_dim}) must equal encoder.d_vil ({self.encoder.d_vil}) "
                "so region tokens live in the text embedding space"
            )
        for index, stage in enumerate(self.train.stages):
            missing = [d for d in stage.datasets if d not in self.datasets]
            if missing:
                raise ValueError(f"stage {index} references unknown datasets: {missing}")
        return self


# =============================================================================
# PRESETS
# =============================================================================

_SHAPES = {"synthetic": {"num_images": 4, "regions_per_image": 3, "seed": 0}}
_SHAPES_EXTRA = {"synthetic": {"num_images": 8, "regions_per_image": 3, "seed": 1}}

PRESETS: Dict[str, Dict[str, Any]] = {
    "lite-toy": {
        "encoder": {"name": "toy-lite", "d_loc": 32, "d_vil": 64, "patch_size": 32,
                    "input_resolution": 224, "frozen": True, "seed": 0},
        "fusion": {"depth": 3, "c_dim": 64, "num_heads": 4},
        "train": {
            "stages": [
                {"datasets": ["shapes"], "iterations": 2000},
                {"datasets": ["shapes", "shapes-extra"], "iterations": 2000},
            ],
            "base_lr": 1e-3,
            "batch_size": 4,
            "eval_every": 1000,
        },
        "datasets": {"shapes": _SHAPES, "shapes-extra": _SHAPES_EXTRA},
    },
    "pro-toy": {
        "encoder": {"name": "toy-pro", "d_loc": 32, "d_vil": 96, "patch_size": 14,
                    "input_resolution": 336, "frozen": True, "seed": 0},
        "fusion": {"depth": 3, "c_dim": 96, "num_heads": 4},
        "train": {
            "stages": [
                {"datasets": ["shapes"], "iterations": 2000},
                {"datasets": ["shapes", "shapes-extra"], "iterations": 2000},
            ],
            "base_lr": 1e-3,
            "batch_size": 4,
            "eval_every": 1000,
        },
        "datasets": {"shapes": _SHAPES, "shapes-extra": _SHAPES_EXTRA},
    },
}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into a copy of base; lists are replaced, not merged."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _format_validation_errors(exc: ValidationError) -> List[Dict[str, str]]:
    return [
        {"field": ".".join(str(part) for part in error["loc"]) or "<root>", "message": error["msg"]}
        for error in exc.errors()
    ]


def build_run_config(document: Dict[str, Any], seed: Optional[int] = None) -> RunConfig:
    """
    Validate a config document, expanding its preset first.

    Args:
        document: Parsed JSON config (may name a preset)
        seed: Global seed override applied to the run and training seeds

    Returns:
        Validated RunConfig

    Raises:
        ConfigValidationError: On unknown preset, unknown keys or invalid values
    """
    if not isinstance(document, dict):
        raise ConfigValidationError("Config document must be a JSON object")

    preset_name = document.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigValidationError(
                f"Unknown preset '{preset_name}'",
                errors=[{"field": "preset", "message": f"choose one of {sorted(PRESETS)}"}],
            )
        document = deep_merge(PRESETS[preset_name], document)

    if seed is not None:
        document = deep_merge(document, {"seed": seed, "train": {"seed": seed}})

    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigValidationError("Invalid run configuration", errors=_format_validation_errors(exc)) from exc


def load_run_config(source: Union[str, Path], seed: Optional[int] = None) -> RunConfig:
    """
    Load a RunConfig from a JSON file path or a bare preset name.

    Args:
        source: Path to a JSON config, or a preset name such as "lite-toy"
        seed: Optional global seed override
    """
    if str(source) in PRESETS and not Path(source).exists():
        return build_run_config({"preset": str(source)}, seed=seed)

    path = Path(source)
    if not path.is_file():
        raise ConfigValidationError(
            f"Config file not found: {path}", errors=[{"field": "--config", "message": "file does not exist"}]
        )
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(
            f"Config file is not valid JSON: {exc.msg}",
            errors=[{"field": "<root>", "message": f"line {exc.lineno} column {exc.colno}: {exc.msg}"}],
        ) from exc
    return build_run_config(document, seed=seed)
