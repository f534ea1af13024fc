"""
regionspot/data/datasets.py - Annotation Ingestion and Batching

Reads COCO-style detection annotations with string class names, merges label spaces
across datasets, and cuts deterministic per-epoch batches with a per-batch vocabulary.
"""

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from regionspot.core.config import get_settings
from regionspot.core.exceptions import AnnotationFormatError, InvalidInputError, ReferentialIntegrityError
from regionspot.core.logging import get_logger
from regionspot.models.encoders import BoxPrompt, ImageInput, load_image, normalize_category_name

logger = get_logger(__name__)

SUPPORTED_FORMATS = ("coco_json",)


# =============================================================================
# DOMAIN TYPES
# =============================================================================

class Region(NamedTuple):
    box: BoxPrompt
    category: str


@dataclass
class AnnotationRecord:
    """One image with its normalized boxes and category names."""

    image_id: str
    image_path: str
    width: int
    height: int
    regions: List[Region] = field(default_factory=list)
    source: str = ""

    @property
    def key(self) -> str:
        """Identity that stays unique when several datasets are mixed."""
        return f"{self.source}:{self.image_id}" if self.source else self.image_id

    @property
    def boxes(self) -> List[BoxPrompt]:
        return [region.box for region in self.regions]

    @property
    def categories(self) -> List[str]:
        return [region.category for region in self.regions]


@dataclass
class LabelSpace:
    """Ordered unique category names with training-set instance counts."""

    names: List[str] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for name in self.names:
            key = normalize_category_name(name)
            if key in seen:
                raise InvalidInputError(f"Label space repeats '{name}'")
            seen.add(key)
            self.counts.setdefault(key, 0)

    @classmethod
    def from_records(cls, records: Iterable[AnnotationRecord]) -> "LabelSpace":
        names: List[str] = []
        counts: Dict[str, int] = {}
        for record in records:
            for region in record.regions:
                key = normalize_category_name(region.category)
                if key not in counts:
                    names.append(region.category.strip())
                    counts[key] = 0
                counts[key] += 1
        return cls(names=names, counts=counts)

    def frequency(self, name: str) -> int:
        return self.counts.get(normalize_category_name(name), 0)

    def __contains__(self, name: str) -> bool:
        return normalize_category_name(name) in self.counts

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class BatchItem:
    record: AnnotationRecord
    boxes: List[BoxPrompt]
    targets: List[int]


@dataclass
class Batch:
    """Records of one step plus the vocabulary their targets index into."""

    batch_id: str
    items: List[BatchItem]
    vocabulary: List[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_regions(self) -> int:
        return sum(len(item.boxes) for item in self.items)


# =============================================================================
# COCO INGESTION
# =============================================================================

def _format_error(message: str, **details: Any) -> AnnotationFormatError:
    return AnnotationFormatError(message, details=details)


class CocoAnnotationLoader:
    """
    Parses COCO-style JSON: images (id, file_name, width, height),
    annotations (image_id, bbox [x, y, w, h], category_id), categories (id, name).
    """

    def __init__(self, image_root: Optional[Union[str, Path]] = None, source: str = ""):
        self.image_root = Path(image_root) if image_root is not None else None
        self.source = source
        self.stats = {
            "images": 0,
            "annotations": 0,
            "regions": 0,
            "dropped_zero_area": 0,
            "images_without_regions": 0,
        }

    def _parse(self, raw: bytes) -> Dict[str, Any]:
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AnnotationFormatError("Annotation file is not UTF-8", byte_offset=exc.start) from exc
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            offset = len(text[:exc.pos].encode("utf-8"))
            raise AnnotationFormatError(f"Annotation JSON is malformed: {exc.msg}", byte_offset=offset) from exc
        if not isinstance(document, dict):
            raise AnnotationFormatError("Annotation document must be a JSON object", byte_offset=0)
        for key in ("images", "annotations", "categories"):
            if not isinstance(document.get(key, []), list):
                raise _format_error(f"'{key}' must be a list", key=key)
        return document

    def load(self, path: Union[str, Path]) -> List[AnnotationRecord]:
        path = Path(path)
        document = self._parse(path.read_bytes())
        image_root = self.image_root or path.parent

        categories: Dict[Any, str] = {}
        for entry in document.get("categories", []):
            name = entry.get("name") if isinstance(entry, dict) else None
            if not isinstance(name, str) or not name.strip() or "id" not in entry:
                raise _format_error("Category entries need an id and a non-empty name", entry=entry)
            categories[entry["id"]] = name.strip()

        records: Dict[Any, AnnotationRecord] = {}
        for entry in document.get("images", []):
            try:
                width, height = int(entry["width"]), int(entry["height"])
                record = AnnotationRecord(
                    image_id=str(entry["id"]),
                    image_path=str(image_root / entry["file_name"]),
                    width=width,
                    height=height,
                    source=self.source,
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise _format_error(f"Image entry is incomplete: {exc}", entry=entry) from exc
            if width < 1 or height < 1:
                raise _format_error("Image width and height must be positive", image_id=record.image_id)
            records[entry["id"]] = record
        self.stats["images"] += len(records)

        for entry in document.get("annotations", []):
            self.stats["annotations"] += 1
            image_key, category_id = entry.get("image_id"), entry.get("category_id")
            if image_key not in records:
                raise ReferentialIntegrityError(
                    "Annotation references an unknown image", details={"image_id": image_key}
                )
            if category_id not in categories:
                raise ReferentialIntegrityError(
                    "Annotation references an unknown category", details={"category_id": category_id}
                )
            bbox = entry.get("bbox")
            if not isinstance(bbox, list) or len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
                raise _format_error("bbox must be [x, y, w, h]", annotation=entry.get("id"))

            record = records[image_key]
            box = BoxPrompt.from_xywh(*bbox, width=record.width, height=record.height)
            if box.area <= 0.0:
                self.stats["dropped_zero_area"] += 1
                continue
            record.regions.append(Region(box, categories[category_id]))
            self.stats["regions"] += 1

        kept = [record for record in records.values() if record.regions]
        self.stats["images_without_regions"] += len(records) - len(kept)
        logger.info(
            f"Loaded {len(kept)} records from {path.name}",
            extra={"extra_data": {"source": self.source, **self.stats}},
        )
        return kept


def load_annotations(
    path: Union[str, Path],
    format: str = "coco_json",
    image_root: Optional[Union[str, Path]] = None,
    source: str = "",
) -> List[AnnotationRecord]:
    """
    Load detection annotations into records with normalized boxes.

    Args:
        path: Annotation file
        format: Only "coco_json" is supported
        image_root: Directory holding file_name entries (defaults to the file's directory)
        source: Dataset id stamped on each record

    Returns:
        Records of images that kept at least one region
    """
    if format not in SUPPORTED_FORMATS:
        raise InvalidInputError(f"Unsupported annotation format '{format}'", details={"supported": SUPPORTED_FORMATS})
    return CocoAnnotationLoader(image_root=image_root, source=source).load(path)


def merge_label_spaces(spaces: Sequence[LabelSpace]) -> LabelSpace:
    """Union by case-folded name, first-seen order, summed counts."""
    if not spaces:
        raise InvalidInputError("merge_label_spaces needs at least one label space")
    names: List[str] = []
    counts: Dict[str, int] = {}
    for space in spaces:
        for name in space.names:
            key = normalize_category_name(name)
            if key not in counts:
                names.append(name)
                counts[key] = 0
            counts[key] += space.counts.get(key, 0)
    return LabelSpace(names=names, counts=counts)


# =============================================================================
# IMAGE LOADING
# =============================================================================

class ImageLoader:
    """
    Lazy image reader. With several workers, files load on a thread pool;
    results always come back in request order.
    """

    def __init__(self, num_workers: Optional[int] = None):
        self.num_workers = num_workers or get_settings().NUM_WORKERS
        self._executor: Optional[ThreadPoolExecutor] = None
        self._lock = threading.Lock()
        self.stats = {"loaded": 0}

    def load(self, record: AnnotationRecord) -> ImageInput:
        image = load_image(record.image_path, image_id=record.image_id).validate()
        with self._lock:
            self.stats["loaded"] += 1
        return image

    def load_many(self, records: Sequence[AnnotationRecord]) -> List[ImageInput]:
        if self.num_workers <= 1 or len(records) <= 1:
            return [self.load(record) for record in records]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.num_workers, thread_name_prefix="ImageLoader")
        return list(self._executor.map(self.load, records))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


# =============================================================================
# BATCHING
# =============================================================================

def _make_batch(batch_id: str, records: Sequence[AnnotationRecord]) -> Batch:
    vocabulary: List[str] = []
    index_of: Dict[str, int] = {}
    items: List[BatchItem] = []
    skipped = 0
    for record in records:
        if not record.regions:
            skipped += 1
            continue
        targets = []
        for region in record.regions:
            key = normalize_category_name(region.category)
            if key not in index_of:
                index_of[key] = len(vocabulary)
                vocabulary.append(region.category)
            targets.append(index_of[key])
        items.append(BatchItem(record=record, boxes=record.boxes, targets=targets))
    return Batch(batch_id=batch_id, items=items, vocabulary=vocabulary, skipped=skipped)


def epoch_order(num_records: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of record positions for an epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(num_records)


def epoch_batches(
    records: Sequence[AnnotationRecord], batch_size: int, seed: int, epoch: int
) -> List[Batch]:
    """Partition a shuffled epoch into consecutive batches."""
    if not records:
        raise InvalidInputError("Cannot batch an empty record list")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be positive", details={"batch_size": batch_size})
    order = epoch_order(len(records), seed, epoch)
    batches = []
    for index, start in enumerate(range(0, len(order), batch_size)):
        chunk = [records[i] for i in order[start:start + batch_size]]
        batches.append(_make_batch(f"e{epoch}-b{index}", chunk))
    skipped = sum(batch.skipped for batch in batches)
    if skipped:
        logger.warning(f"Skipped {skipped} records without regions in epoch {epoch}")
    return batches


def sample_batch(
    records: Sequence[AnnotationRecord], batch_size: int, seed: int, epoch: int, index: int = 0
) -> Batch:
    """The index-th batch of the (seed, epoch) shuffle."""
    batches = epoch_batches(records, batch_size, seed, epoch)
    return batches[index % len(batches)]
