"""
regionspot/models/encoders.py - Frozen Backbone Contracts and Toy Encoders

Defines the localization, vision-language and text encoder contracts the fusion head
consumes, plus seeded deterministic toy implementations that run at desk scale.
Encoders are read-only after construction and safe to call from several threads.
"""

import hashlib
import math
import string
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator, model_validator

from regionspot.core.exceptions import (
    DuplicateCategoryError,
    InvalidBoxError,
    InvalidInputError,
    TemplateError,
)
from regionspot.core.logging import get_logger

logger = get_logger(__name__)

# Appearance grid of the toy localization encoder
LOC_GRID = 16
# Hash buckets of the toy text encoder
TEXT_BUCKETS = 1024


# =============================================================================
# DOMAIN TYPES
# =============================================================================

class SourceTap(str, Enum):
    """Where position-aware tokens are read out of the localization model."""

    PROMPT_ENCODER = "prompt_encoder"
    TRANSFORMER_DECODER = "transformer_decoder"
    MLP = "mlp"


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box in normalized (x1, y1, x2, y2) coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self, index: Optional[int] = None) -> "BoxPrompt":
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError("Box has non-finite coordinates", index=index, details={"box": coords})
        if any(c < 0.0 or c > 1.0 for c in coords):
            raise InvalidBoxError("Box coordinates must lie in [0, 1]", index=index, details={"box": coords})
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError("Box must satisfy x1 < x2 and y1 < y2", index=index, details={"box": coords})
        return self

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, width: int, height: int) -> "BoxPrompt":
        """Convert an absolute-pixel (x, y, w, h) box, clipped to the image."""
        x1 = min(max(x / width, 0.0), 1.0)
        y1 = min(max(y / height, 0.0), 1.0)
        x2 = min(max((x + w) / width, 0.0), 1.0)
        y2 = min(max((y + h) / height, 0.0), 1.0)
        return cls(x1, y1, x2, y2)

    def to_xywh(self, width: int, height: int) -> Tuple[float, float, float, float]:
        """Absolute-pixel (x, y, w, h) for an image of the given size."""
        return (
            self.x1 * width,
            self.y1 * height,
            (self.x2 - self.x1) * width,
            (self.y2 - self.y1) * height,
        )

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class ImageInput:
    """Dense H x W x 3 image with values in [0, 1]."""

    pixels: np.ndarray
    id: str

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def validate(self) -> "ImageInput":
        pixels = self.pixels
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidInputError(
                "Image must be an H x W x 3 array", details={"image_id": self.id, "shape": list(pixels.shape)}
            )
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidInputError("Image is empty", details={"image_id": self.id, "shape": list(pixels.shape)})
        if not np.all(np.isfinite(pixels)):
            raise InvalidInputError("Image has non-finite pixels", details={"image_id": self.id})
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError("Pixel values must lie in [0, 1]", details={"image_id": self.id})
        return self


def load_image(path: Union[str, Path], image_id: Optional[str] = None) -> ImageInput:
    """Read an image file as RGB floats in [0, 1]."""
    path = Path(path)
    with Image.open(path) as handle:
        pixels = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
    return ImageInput(pixels=pixels, id=image_id if image_id is not None else path.stem)


@dataclass
class PositionAwareTokenSet:
    """One localization token per box, in box order."""

    tokens: np.ndarray
    source_tap: SourceTap

    @property
    def count(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class SemanticFeatureMap:
    """Flattened patch grid plus the global class token of the ViL image encoder."""

    grid_tokens: np.ndarray
    class_token: np.ndarray
    grid_hw: Tuple[int, int]

    @property
    def num_patches(self) -> int:
        return int(self.grid_tokens.shape[0])

    def validate(self) -> "SemanticFeatureMap":
        rows, cols = self.grid_hw
        if self.num_patches < 1 or rows * cols != self.num_patches:
            raise InvalidInputError(
                "Feature map grid is inconsistent",
                details={"grid_hw": list(self.grid_hw), "num_patches": self.num_patches},
            )
        if not (np.all(np.isfinite(self.grid_tokens)) and np.all(np.isfinite(self.class_token))):
            raise InvalidInputError("Feature map has non-finite values")
        return self


@dataclass
class TextEmbeddingTable:
    """Unit-norm text embeddings, one row per category."""

    embeddings: np.ndarray
    category_names: List[str]
    template: str

    @property
    def prompts(self) -> List[str]:
        return [self.template.format(name) for name in self.category_names]

    def __len__(self) -> int:
        return len(self.category_names)


class EncoderSpec(BaseModel):
    """Backbone dimensions and the freeze contract, stored in every checkpoint."""

    model_config = ConfigDict(extra="forbid")

    name: str
    d_loc: PositiveInt
    d_vil: PositiveInt
    patch_size: PositiveInt
    input_resolution: PositiveInt
    frozen: bool = True
    seed: int = 0

    @field_validator("frozen")
    @classmethod
    def _must_be_frozen(cls, value: bool) -> bool:
        if not value:
            raise ValueError("backbone encoders are always frozen")
        return value

    @model_validator(mode="after")
    def _resolution_divisible(self) -> "EncoderSpec":
        if self.input_resolution % self.patch_size:
            raise ValueError(
                f"input_resolution {self.input_resolution} is not divisible by patch_size {self.patch_size}"
            )
        return self

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2


# =============================================================================
# SHARED HELPERS
# =============================================================================

def fixed_matrix(seed: int, name: str, shape: Tuple[int, ...], scale: float) -> np.ndarray:
    """Frozen random weights: one generator per (seed, name), so draw order never matters."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
    return rng.standard_normal(shape) * scale


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize H x W x C without cropping (aspect ratio is not preserved)."""
    tensor = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)).permute(2, 0, 1)[None]
    resized = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    return resized[0].permute(1, 2, 0).numpy()


def validate_boxes(boxes: Sequence[BoxPrompt]) -> None:
    for index, box in enumerate(boxes):
        if not isinstance(box, BoxPrompt):
            raise InvalidBoxError("Box prompts must be BoxPrompt instances", index=index)
        box.validate(index=index)


# =============================================================================
# CONTRACTS
# =============================================================================

class FrozenBackbone(ABC):
    """Holds read-only parameters and exposes snapshots for freeze checks."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self._params: Dict[str, np.ndarray] = {}

    @property
    def frozen(self) -> bool:
        return True

    def _register(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=np.float64)
        value.flags.writeable = False
        self._params[name] = value
        return value

    def backbone_parameters(self) -> Dict[str, np.ndarray]:
        """Copy of every backbone parameter, keyed by name."""
        return {name: value.copy() for name, value in self._params.items()}

    def parameter_count(self) -> int:
        return int(sum(value.size for value in self._params.values()))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode("utf-8"))
            digest.update(self._params[name].tobytes())
        return digest.hexdigest()


class LocalizationEncoder(FrozenBackbone):
    """Promptable localizer producing one position-aware token per box."""

    @abstractmethod
    def encode_localization(
        self,
        image: ImageInput,
        boxes: Sequence[BoxPrompt],
        tap: Union[SourceTap, str] = SourceTap.TRANSFORMER_DECODER,
    ) -> PositionAwareTokenSet:
        """Encode the boxes of an image at the given tap point."""


class VisionLanguageEncoder(FrozenBackbone):
    """Image-level ViL encoder producing the semantic feature map."""

    @abstractmethod
    def encode_vil_image(self, image: ImageInput) -> SemanticFeatureMap:
        """Encode the whole image, resized to the input resolution."""


class TextEncoder(FrozenBackbone):
    """Text tower of the ViL model."""

    @abstractmethod
    def encode_text(self, categories: Sequence[str], template: str) -> TextEmbeddingTable:
        """Embed each category wrapped in the template."""


# =============================================================================
# TOY IMPLEMENTATIONS
# =============================================================================

class ToyLocalizationEncoder(LocalizationEncoder):
    """
    Deterministic stand-in for a promptable segmenter.

    prompt_encoder tokens are random Fourier features of the two box corners;
    transformer_decoder tokens mix those with appearance pooled inside the box;
    mlp tokens pass the decoder tokens through a low-rank bottleneck.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__(spec)
        d = spec.d_loc
        self.num_freqs = max(1, d // 4)
        self.bottleneck = max(1, d // 4)
        seed = spec.seed

        self.pixel_proj = self._register("loc.pixel_proj", fixed_matrix(seed, "loc.pixel_proj", (3, d), 1.0))
        self.pixel_bias = self._register("loc.pixel_bias", fixed_matrix(seed, "loc.pixel_bias", (d,), 0.1))
        self.fourier = self._register("loc.fourier", fixed_matrix(seed, "loc.fourier", (2, self.num_freqs), 1.0))
        self.prompt_proj = self._register(
            "loc.prompt_proj",
            fixed_matrix(seed, "loc.prompt_proj", (4 * self.num_freqs, d), 1.0 / math.sqrt(4 * self.num_freqs)),
        )
        self.decoder_proj = self._register(
            "loc.decoder_proj", fixed_matrix(seed, "loc.decoder_proj", (2 * d, d), 1.0 / math.sqrt(2 * d))
        )
        self.decoder_bias = self._register("loc.decoder_bias", fixed_matrix(seed, "loc.decoder_bias", (d,), 0.1))
        self.mlp_down = self._register(
            "loc.mlp_down", fixed_matrix(seed, "loc.mlp_down", (d, self.bottleneck), 1.0 / math.sqrt(d))
        )
        self.mlp_up = self._register(
            "loc.mlp_up", fixed_matrix(seed, "loc.mlp_up", (self.bottleneck, d), 1.0 / math.sqrt(self.bottleneck))
        )

    def _corner_features(self, points: np.ndarray) -> np.ndarray:
        projected = 2.0 * math.pi * ((2.0 * points - 1.0) @ self.fourier)
        return np.concatenate([np.sin(projected), np.cos(projected)], axis=-1)

    def _pool_cells(self, features: np.ndarray, box: BoxPrompt) -> np.ndarray:
        centers = (np.arange(LOC_GRID) + 0.5) / LOC_GRID
        cols = (centers >= box.x1) & (centers <= box.x2)
        rows = (centers >= box.y1) & (centers <= box.y2)
        mask = rows[:, None] & cols[None, :]
        if not mask.any():
            cx, cy = box.center
            ix = min(LOC_GRID - 1, int(math.floor(cx * LOC_GRID)))
            iy = min(LOC_GRID - 1, int(math.floor(cy * LOC_GRID)))
            return features[iy, ix]
        return features[mask].mean(axis=0)

    def encode_localization(
        self,
        image: ImageInput,
        boxes: Sequence[BoxPrompt],
        tap: Union[SourceTap, str] = SourceTap.TRANSFORMER_DECODER,
    ) -> PositionAwareTokenSet:
        image.validate()
        validate_boxes(boxes)
        tap = SourceTap(tap)
        d = self.spec.d_loc

        if not boxes:
            return PositionAwareTokenSet(tokens=np.zeros((0, d), dtype=np.float32), source_tap=tap)

        corners = np.array([box.as_list() for box in boxes], dtype=np.float64)
        box_embed = np.concatenate(
            [self._corner_features(corners[:, 0:2]), self._corner_features(corners[:, 2:4])], axis=-1
        )
        tokens = box_embed @ self.prompt_proj

        if tap is not SourceTap.PROMPT_ENCODER:
            cells = resize_bilinear(image.pixels, LOC_GRID, LOC_GRID)
            features = np.tanh(cells @ self.pixel_proj + self.pixel_bias)
            pooled = np.stack([self._pool_cells(features, box) for box in boxes])
            tokens = np.tanh(np.concatenate([pooled, tokens], axis=-1) @ self.decoder_proj + self.decoder_bias)

            if tap is SourceTap.MLP:
                tokens = np.maximum(tokens @ self.mlp_down, 0.0) @ self.mlp_up

        return PositionAwareTokenSet(tokens=tokens.astype(np.float32), source_tap=tap)


class ToyVisionLanguageEncoder(VisionLanguageEncoder):
    """Fixed random patch embedding with positional offsets and a pooled class token."""

    def __init__(self, spec: EncoderSpec):
        super().__init__(spec)
        d = spec.d_vil
        patch_dim = spec.patch_size * spec.patch_size * 3
        seed = spec.seed

        self.patch_embed = self._register(
            "vil.patch_embed", fixed_matrix(seed, "vil.patch_embed", (patch_dim, d), 1.0 / math.sqrt(patch_dim))
        )
        self.patch_bias = self._register("vil.patch_bias", fixed_matrix(seed, "vil.patch_bias", (d,), 0.1))
        self.pos_embed = self._register(
            "vil.pos_embed", fixed_matrix(seed, "vil.pos_embed", (spec.num_patches, d), 0.1)
        )
        self.class_proj = self._register(
            "vil.class_proj", fixed_matrix(seed, "vil.class_proj", (d, d), 1.0 / math.sqrt(d))
        )

    def encode_vil_image(self, image: ImageInput) -> SemanticFeatureMap:
        image.validate()
        size = self.spec.input_resolution
        p = self.spec.patch_size
        g = self.spec.grid_size

        resized = resize_bilinear(image.pixels, size, size)
        patches = resized.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        grid = np.tanh(patches @ self.patch_embed + self.patch_bias) + self.pos_embed
        class_token = np.tanh(grid.mean(axis=0) @ self.class_proj)

        return SemanticFeatureMap(
            grid_tokens=grid.astype(np.float32),
            class_token=class_token.astype(np.float32),
            grid_hw=(g, g),
        )


def check_template(template: str) -> str:
    """Require exactly one bare {} placeholder."""
    try:
        fields = [
            (name, spec, conversion)
            for _, name, spec, conversion in string.Formatter().parse(template)
            if name is not None
        ]
    except ValueError as exc:
        raise TemplateError(f"Template cannot be parsed: {exc}", details={"template": template}) from exc
    if len(fields) != 1 or fields[0] != ("", "", None):
        raise TemplateError("Template must contain exactly one {} placeholder", details={"template": template})
    return template


def normalize_category_name(name: str) -> str:
    """Key used for duplicate detection and label-space merging."""
    return name.strip().casefold()


class ToyTextEncoder(TextEncoder):
    """Hashed bag of character trigrams and words through a fixed random matrix."""

    def __init__(self, spec: EncoderSpec):
        super().__init__(spec)
        self.text_proj = self._register(
            "text.proj",
            fixed_matrix(spec.seed, "text.proj", (TEXT_BUCKETS, spec.d_vil), 1.0 / math.sqrt(TEXT_BUCKETS)),
        )

    @staticmethod
    def featurize(prompt: str) -> np.ndarray:
        counts = np.zeros(TEXT_BUCKETS, dtype=np.float64)
        padded = f" {prompt} "
        for start in range(len(padded) - 2):
            counts[zlib.crc32(padded[start:start + 3].encode("utf-8")) % TEXT_BUCKETS] += 1.0
        for word in prompt.split():
            counts[zlib.crc32(f"w:{word}".encode("utf-8")) % TEXT_BUCKETS] += 1.0
        return counts

    def encode_text(self, categories: Sequence[str], template: str) -> TextEmbeddingTable:
        check_template(template)
        seen: Dict[str, int] = {}
        for index, name in enumerate(categories):
            if not isinstance(name, str) or not name.strip():
                raise InvalidInputError("Category names must be non-empty strings", details={"index": index})
            key = normalize_category_name(name)
            if key in seen:
                raise DuplicateCategoryError(
                    f"Category '{name}' duplicates '{categories[seen[key]]}'",
                    details={"index": index, "first_index": seen[key]},
                )
            seen[key] = index

        d = self.spec.d_vil
        if not categories:
            return TextEmbeddingTable(np.zeros((0, d), dtype=np.float32), [], template)

        counts = np.stack([self.featurize(template.format(name)) for name in categories])
        embeddings = counts @ self.text_proj
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        embeddings = embeddings / np.maximum(norms, 1e-12)
        return TextEmbeddingTable(embeddings.astype(np.float32), list(categories), template)


@dataclass
class EncoderSuite:
    """The three frozen towers built from one EncoderSpec."""

    spec: EncoderSpec
    localization: LocalizationEncoder
    vil: VisionLanguageEncoder
    text: TextEncoder

    def backbones(self) -> List[FrozenBackbone]:
        return [self.localization, self.vil, self.text]

    def backbone_parameters(self) -> Dict[str, np.ndarray]:
        snapshot: Dict[str, np.ndarray] = {}
        for backbone in self.backbones():
            snapshot.update(backbone.backbone_parameters())
        return snapshot

    def parameter_count(self) -> int:
        return sum(backbone.parameter_count() for backbone in self.backbones())

    def checksum(self) -> str:
        return hashlib.sha256("".join(b.checksum() for b in self.backbones()).encode("utf-8")).hexdigest()


def build_toy_encoders(spec: EncoderSpec) -> EncoderSuite:
    """Construct the seeded toy towers for a spec."""
    suite = EncoderSuite(
        spec=spec,
        localization=ToyLocalizationEncoder(spec),
        vil=ToyVisionLanguageEncoder(spec),
        text=ToyTextEncoder(spec),
    )
    logger.debug(f"Built toy encoders '{spec.name}' with {suite.parameter_count()} frozen parameters")
    return suite
