# Pytest Configuration

"""
Pytest fixtures and configuration for tests.

Everything runs on CPU at toy scale: 64-pixel ViL input with 16-pixel patches
(a 4 x 4 grid), 16-wide localization tokens and 32-wide fusion tokens.
"""

from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from regionspot.core.config import RunConfig, build_run_config, deep_merge
from regionspot.data.synthetic import write_synthetic_dataset
from regionspot.models.encoders import EncoderSpec, EncoderSuite, ImageInput, build_toy_encoders
from regionspot.models.fusion import FusionConfig

SHAPES_CATEGORIES = ["red block", "green block", "blue block"]


def base_config_document() -> Dict[str, Any]:
    return {
        "seed": 0,
        "encoder": {"name": "test", "d_loc": 16, "d_vil": 32, "patch_size": 16, "input_resolution": 64},
        "fusion": {"depth": 1, "c_dim": 32, "num_heads": 4},
        "train": {
            "stages": [{"datasets": ["shapes"], "iterations": 5}],
            "base_lr": 3e-3,
            "batch_size": 4,
        },
        "datasets": {"shapes": {"synthetic": {"num_images": 4, "regions_per_image": 3, "seed": 0}}},
    }


@pytest.fixture
def config_document() -> Dict[str, Any]:
    """Raw JSON form of the small run config."""
    return base_config_document()


@pytest.fixture
def make_config() -> Callable[..., RunConfig]:
    """Factory for small RunConfigs; keyword overrides are deep-merged."""

    def factory(**overrides: Any) -> RunConfig:
        return build_run_config(deep_merge(base_config_document(), overrides))

    return factory


@pytest.fixture
def small_spec() -> EncoderSpec:
    return EncoderSpec(name="test", d_loc=16, d_vil=32, patch_size=16, input_resolution=64)


@pytest.fixture
def encoders(small_spec: EncoderSpec) -> EncoderSuite:
    return build_toy_encoders(small_spec)


@pytest.fixture
def fusion_config() -> FusionConfig:
    return FusionConfig(depth=2, c_dim=32, num_heads=4)


@pytest.fixture
def random_image() -> ImageInput:
    """Non-square image so resizing is exercised."""
    rng = np.random.default_rng(0)
    return ImageInput(pixels=rng.uniform(0.0, 1.0, (40, 56, 3)), id="random")


@pytest.fixture
def shapes_annotations(tmp_path: Path) -> Path:
    """Four synthetic images with three blocks each."""
    return write_synthetic_dataset(tmp_path / "shapes", num_images=4, regions_per_image=3, seed=0)
