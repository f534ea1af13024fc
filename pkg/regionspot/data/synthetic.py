"""
regionspot/data/synthetic.py - Synthetic Shapes Dataset

Writes a small COCO-style dataset of coloured blocks on a grey background, one colour
per category. Used by presets and tests as a desk-scale stand-in for detection data.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from regionspot.core.logging import get_logger

logger = get_logger(__name__)

PALETTE = [
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.10),
    (0.10, 0.20, 0.90),
    (0.95, 0.85, 0.10),
    (0.80, 0.10, 0.80),
    (0.10, 0.85, 0.85),
]

DEFAULT_CATEGORIES = ["red block", "green block", "blue block"]


def category_colors(categories: Sequence[str], seed: int = 0) -> Dict[str, tuple]:
    """Palette colours first, then seeded random colours."""
    rng = np.random.default_rng([seed, 7])
    colors = {}
    for index, name in enumerate(categories):
        colors[name] = PALETTE[index] if index < len(PALETTE) else tuple(rng.uniform(0.0, 1.0, 3))
    return colors


def write_synthetic_dataset(
    out_dir: Union[str, Path],
    num_images: int = 4,
    regions_per_image: int = 3,
    categories: Optional[Sequence[str]] = None,
    image_size: int = 64,
    seed: int = 0,
) -> Path:
    """
    Generate PNG images and an annotations.json next to them.

    Region j of image i gets category (i + j) mod K and sits in its own vertical
    column, so boxes never overlap and position does not reveal the category.

    Returns:
        Path of the written annotations file
    """
    categories = list(categories or DEFAULT_CATEGORIES)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    colors = category_colors(categories, seed)

    images: List[dict] = []
    annotations: List[dict] = []
    column = image_size / regions_per_image

    for i in range(num_images):
        pixels = np.full((image_size, image_size, 3), 0.5) + rng.normal(0.0, 0.02, (image_size, image_size, 3))
        for j in range(regions_per_image):
            name = categories[(i + j) % len(categories)]
            w = max(2, int(column * rng.uniform(0.5, 0.9)))
            h = max(2, int(image_size * rng.uniform(0.3, 0.6)))
            x = int(j * column + rng.uniform(0, max(column - w, 0)))
            y = int(rng.uniform(0, image_size - h))
            pixels[y:y + h, x:x + w] = colors[name]
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": i + 1,
                "bbox": [x, y, w, h],
                "category_id": categories.index(name) + 1,
            })

        file_name = f"image_{i:04d}.png"
        rgb = (np.clip(pixels, 0.0, 1.0) * 255).round().astype(np.uint8)
        Image.fromarray(rgb).save(out_dir / file_name)
        images.append({"id": i + 1, "file_name": file_name, "width": image_size, "height": image_size})

    document = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": k + 1, "name": name} for k, name in enumerate(categories)],
    }
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")
    logger.info(f"Wrote synthetic dataset with {num_images} images and {len(annotations)} regions to {out_dir}")
    return path
