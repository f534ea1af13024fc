"""
regionspot/services/evaluator.py - Zero-Shot Region Recognition Evaluation

Prompted inference over fixed boxes (GT or external proposals), bucketed AP
reporting, and cross-attention heatmap export.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from matplotlib import colormaps
from PIL import Image
from pydantic import ValidationError

from regionspot.core.config import EvalOptions, get_settings
from regionspot.core.exceptions import AnnotationFormatError, InvalidInputError, RangeError
from regionspot.core.logging import get_logger
from regionspot.data.datasets import AnnotationRecord, LabelSpace
from regionspot.models.alignment import matching_scores, predict_labels
from regionspot.models.encoders import BoxPrompt, EncoderSuite, ImageInput, build_toy_encoders, normalize_category_name
from regionspot.models.fusion import AttentionRecord, fusion_forward
from regionspot.schema import CategoryResult, EvalReport, LabelScore, PredictionLine, ProposalLine
from regionspot.services.checkpoint import Checkpoint, load_checkpoint, write_array_container

logger = get_logger(__name__)

RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)


# =============================================================================
# PROPOSALS
# =============================================================================

@dataclass
class Proposal:
    box: BoxPrompt
    score: float = 1.0
    source: Optional[str] = None


@dataclass
class ProposalSet:
    """Per-image proposals; scores in [0, 1], boxes valid."""

    by_image: Dict[str, List[Proposal]] = field(default_factory=dict)

    def get(self, image_id: str) -> List[Proposal]:
        return self.by_image.get(image_id, [])

    def validate(self) -> "ProposalSet":
        for image_id, proposals in self.by_image.items():
            for index, proposal in enumerate(proposals):
                proposal.box.validate(index)
                if not 0.0 <= proposal.score <= 1.0:
                    raise InvalidInputError("Proposal score must lie in [0, 1]",
                                            details={"image_id": image_id, "index": index, "score": proposal.score})
        return self

    @classmethod
    def from_records(cls, records: Sequence[AnnotationRecord]) -> "ProposalSet":
        """Ground-truth boxes as proposals with objectness 1."""
        return cls({r.image_id: [Proposal(box, 1.0, "gt") for box in r.boxes] for r in records})


def load_proposals(path: Union[str, Path]) -> ProposalSet:
    """
    Read proposals from JSON lines {image_id, bbox [x1, y1, x2, y2] normalized, score}.

    Raises:
        AnnotationFormatError: With the byte offset of the offending line
    """
    proposals = ProposalSet()
    offset = 0
    with open(path, "rb") as handle:
        for raw in handle:
            line_start, offset = offset, offset + len(raw)
            if not raw.strip():
                continue
            try:
                line = ProposalLine.model_validate_json(raw)
            except ValidationError as exc:
                raise AnnotationFormatError(f"Invalid proposal line: {exc.errors()[0]['msg']}",
                                            byte_offset=line_start) from exc
            bucket = proposals.by_image.setdefault(line.image_id, [])
            bucket.append(Proposal(BoxPrompt(*line.bbox).validate(len(bucket)), line.score, line.source))
    logger.info(f"Loaded proposals for {len(proposals.by_image)} images from {Path(path).name}")
    return proposals.validate()


# =============================================================================
# INFERENCE
# =============================================================================

class RegionPredictor:
    """A loaded checkpoint plus the frozen encoders it was trained against."""

    def __init__(self, checkpoint: Checkpoint, encoders: Optional[EncoderSuite] = None):
        self.checkpoint = checkpoint
        self.encoders = encoders or build_toy_encoders(checkpoint.encoder_spec)
        self.head = checkpoint.build_head()

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "RegionPredictor":
        return cls(load_checkpoint(path))

    @property
    def temperature(self) -> float:
        return float(self.head.logit_scale.detach())

    def _forward(self, image: ImageInput, boxes: Sequence[BoxPrompt], return_attention: bool = False):
        tokens = self.encoders.localization.encode_localization(image, boxes, self.checkpoint.source_tap)
        feature_map = self.encoders.vil.encode_vil_image(image)
        region_tokens, records = fusion_forward(self.head.fusion, tokens, feature_map, return_attention)
        return region_tokens, records, feature_map

    def predict(
        self,
        image: ImageInput,
        proposals: Sequence[Proposal],
        vocabulary: Sequence[str],
        top_k: Optional[int] = None,
    ) -> List[PredictionLine]:
        if not vocabulary:
            raise InvalidInputError("Vocabulary must name at least one category")
        if not proposals:
            return []
        alignment = self.checkpoint.alignment
        table = self.encoders.text.encode_text(list(vocabulary), alignment.effective_template)
        region_tokens, _, _ = self._forward(image, [p.box for p in proposals])
        scores = matching_scores(region_tokens, table, self.temperature)
        k = min(top_k or alignment.top_k, len(vocabulary))

        lines = []
        for index, (proposal, ranked) in enumerate(zip(proposals, predict_labels(scores, list(vocabulary), k))):
            lines.append(PredictionLine(
                image_id=image.id,
                box_index=index,
                box=proposal.box.as_list(),
                objectness=proposal.score,
                top=[LabelScore(category=name, score=probability * proposal.score) for name, probability in ranked],
            ))
        return lines

    def attention(self, image: ImageInput, boxes: Sequence[BoxPrompt]) -> Tuple[List[AttentionRecord], Tuple[int, int]]:
        _, records, feature_map = self._forward(image, boxes, return_attention=True)
        return records, feature_map.grid_hw


def infer_regions(
    checkpoint: Union[Checkpoint, RegionPredictor],
    image: ImageInput,
    proposals: Sequence[Proposal],
    vocabulary: Sequence[str],
    top_k: Optional[int] = None,
) -> List[PredictionLine]:
    """
    Ranked category predictions per proposal.

    Detection score is sigmoid(logit) times proposal objectness.
    """
    predictor = checkpoint if isinstance(checkpoint, RegionPredictor) else RegionPredictor(checkpoint)
    return predictor.predict(image, proposals, vocabulary, top_k)


def predictions_to_jsonl(predictions: Sequence[PredictionLine]) -> str:
    """Stable JSONL ordered by (image_id, box_index)."""
    ordered = sorted(predictions, key=lambda p: (p.image_id, p.box_index))
    return "".join(p.model_dump_json() + "\n" for p in ordered)


def load_predictions(path: Union[str, Path]) -> List[PredictionLine]:
    lines = []
    offset = 0
    with open(path, "rb") as handle:
        for raw in handle:
            line_start, offset = offset, offset + len(raw)
            if not raw.strip():
                continue
            try:
                lines.append(PredictionLine.model_validate_json(raw))
            except ValidationError as exc:
                raise AnnotationFormatError(f"Invalid prediction line: {exc.errors()[0]['msg']}",
                                            byte_offset=line_start) from exc
    return lines


# =============================================================================
# AVERAGE PRECISION
# =============================================================================

def average_precision(scores: Sequence[float], matches: Sequence[bool], num_positives: int) -> float:
    """
    101-point interpolated AP of score-ranked detections.

    Precision is made monotone from the right, then sampled at the first rank whose
    recall reaches each threshold; thresholds never reached contribute 0.
    """
    if num_positives <= 0:
        return 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    hits = np.asarray(matches, dtype=bool)[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_positives
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]

    inds = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    sampled = np.where(inds < len(precision), precision[np.minimum(inds, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def box_iou(a: BoxPrompt, b: BoxPrompt) -> float:
    w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = w * h
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


Detection = Tuple[str, float, bool]


def _fixed_box_partial(record: AnnotationRecord, predictions: Sequence[PredictionLine]) -> List[Detection]:
    truth = [normalize_category_name(c) for c in record.categories]
    detections = []
    for line in predictions:
        if line.box_index >= len(truth):
            raise InvalidInputError(
                "Prediction does not match a ground-truth box",
                details={"image_id": line.image_id, "box_index": line.box_index, "num_boxes": len(truth)},
            )
        for label in line.top:
            key = normalize_category_name(label.category)
            detections.append((key, label.score, key == truth[line.box_index]))
    return detections


def _detection_partial(
    record: AnnotationRecord, predictions: Sequence[PredictionLine], iou_threshold: float
) -> List[Detection]:
    flat = [
        (normalize_category_name(label.category), label.score, BoxPrompt(*line.box))
        for line in predictions
        for label in line.top
    ]
    order = sorted(range(len(flat)), key=lambda i: -flat[i][1])
    matched = [False] * len(record.regions)
    hits: Dict[int, bool] = {}
    for i in order:
        key, _, box = flat[i]
        best, best_iou = -1, iou_threshold
        for j, region in enumerate(record.regions):
            if matched[j] or normalize_category_name(region.category) != key:
                continue
            iou = box_iou(box, region.box)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
        hits[i] = best >= 0
    return [(key, score, hits[i]) for i, (key, score, _) in enumerate(flat)]


def _bucket(count: int, options: EvalOptions) -> str:
    if count < options.rare_threshold:
        return "r"
    if count < options.common_threshold:
        return "c"
    return "f"


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def evaluate_recognition(
    predictions: Sequence[PredictionLine],
    ground_truth: Sequence[AnnotationRecord],
    label_space: Optional[LabelSpace] = None,
    options: Optional[EvalOptions] = None,
    vocabulary: Optional[Sequence[str]] = None,
) -> EvalReport:
    """
    Per-category AP with r/c/f bucket means.

    Args:
        predictions: Region predictions; in fixed-box mode box_index names the GT box
        ground_truth: Annotated records of the evaluated images
        label_space: Training label space for bucket counts (defaults to GT counts)
        options: Mode and bucket thresholds
        vocabulary: Names offered to the model; GT categories outside it score 0 and are flagged

    Returns:
        EvalReport over categories with at least one GT instance
    """
    options = options or EvalOptions()
    records = {record.image_id: record for record in ground_truth}
    by_image: Dict[str, List[PredictionLine]] = {image_id: [] for image_id in records}
    for line in predictions:
        if line.image_id not in records:
            raise InvalidInputError("Prediction refers to an unknown image", details={"image_id": line.image_id})
        by_image[line.image_id].append(line)

    def partial(image_id: str) -> List[Detection]:
        if options.mode == "detection":
            return _detection_partial(records[image_id], by_image[image_id], options.iou_threshold)
        return _fixed_box_partial(records[image_id], by_image[image_id])

    workers = get_settings().NUM_WORKERS
    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="Evaluator") as executor:
            partials = list(executor.map(partial, list(records)))
    else:
        partials = [partial(image_id) for image_id in records]

    # Merge in GT image order.
    per_category: Dict[str, Tuple[List[float], List[bool]]] = {}
    for detections in partials:
        for key, score, hit in detections:
            scores, hits = per_category.setdefault(key, ([], []))
            scores.append(score)
            hits.append(hit)

    gt_space = LabelSpace.from_records(ground_truth)
    counts_space = label_space or gt_space
    offered = {normalize_category_name(name) for name in vocabulary} if vocabulary is not None else None

    results: List[CategoryResult] = []
    missing: List[str] = []
    for name in gt_space.names:
        key = normalize_category_name(name)
        in_vocabulary = offered is None or key in offered
        if in_vocabulary:
            scores, hits = per_category.get(key, ([], []))
            ap = average_precision(scores, hits, gt_space.frequency(name))
        else:
            ap = 0.0
            missing.append(name)
        results.append(CategoryResult(
            name=name,
            ap=ap,
            bucket=_bucket(counts_space.frequency(name), options),
            gt_instances=gt_space.frequency(name),
            train_instances=counts_space.frequency(name),
            in_vocabulary=in_vocabulary,
        ))

    if missing:
        logger.warning(f"{len(missing)} evaluated categories are absent from the vocabulary",
                       extra={"extra_data": {"missing": missing}})

    report = EvalReport(
        mode=options.mode,
        per_category=results,
        ap_r=_mean([r.ap for r in results if r.bucket == "r"]),
        ap_c=_mean([r.ap for r in results if r.bucket == "c"]),
        ap_f=_mean([r.ap for r in results if r.bucket == "f"]),
        map=_mean([r.ap for r in results]) or 0.0,
        num_regions=len(predictions),
        num_images=len(records),
        thresholds={
            "rare_threshold": options.rare_threshold,
            "common_threshold": options.common_threshold,
            "iou_threshold": options.iou_threshold,
        },
        missing_categories=missing,
    )
    logger.info(f"mAP {report.map * 100:.1f} over {len(results)} categories")
    return report


# =============================================================================
# REPORTING
# =============================================================================

def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{value * 100:.1f}"


def render_report_table(report: EvalReport) -> str:
    """Human-readable per-category table followed by the summary rows."""
    frame = pd.DataFrame(
        [
            {"category": r.name, "bucket": r.bucket, "gt": r.gt_instances, "train": r.train_instances,
             "AP": _pct(r.ap), "in_vocab": "yes" if r.in_vocabulary else "NO"}
            for r in report.per_category
        ],
        columns=["category", "bucket", "gt", "train", "AP", "in_vocab"],
    )
    summary = pd.DataFrame(
        [{"metric": "mAP", "value": _pct(report.map)},
         {"metric": "AP_r", "value": _pct(report.ap_r)},
         {"metric": "AP_c", "value": _pct(report.ap_c)},
         {"metric": "AP_f", "value": _pct(report.ap_f)},
         {"metric": "images", "value": str(report.num_images)},
         {"metric": "regions", "value": str(report.num_regions)}]
    )
    return frame.to_string(index=False) + "\n\n" + summary.to_string(index=False) + "\n"


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table_path = out_dir / "report.txt"
    table_path.write_text(render_report_table(report), encoding="utf-8")
    return json_path, table_path


# =============================================================================
# ATTENTION EXPORT
# =============================================================================

def heatmap_to_image(heatmap: np.ndarray) -> Image.Image:
    """8-bit grayscale, scaled so the peak is white."""
    peak = float(heatmap.max()) if heatmap.size else 0.0
    scaled = heatmap / peak if peak > 0 else np.zeros_like(heatmap)
    return Image.fromarray((np.clip(scaled, 0.0, 1.0) * 255).round().astype(np.uint8))


def overlay_heatmap(image: ImageInput, heatmap: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> Image.Image:
    """Colour-mapped heatmap upsampled to the image and alpha-blended over it."""
    peak = float(heatmap.max()) if heatmap.size else 0.0
    scaled = (heatmap / peak if peak > 0 else np.zeros_like(heatmap)).astype(np.float32)
    upsampled = Image.fromarray(scaled).resize((image.width, image.height), Image.BILINEAR)
    colors = colormaps[cmap](np.clip(np.asarray(upsampled), 0.0, 1.0))[..., :3]
    blended = (1.0 - alpha) * image.pixels[..., :3] + alpha * colors
    return Image.fromarray((np.clip(blended, 0.0, 1.0) * 255).round().astype(np.uint8))


def export_attention(
    checkpoint: Union[Checkpoint, RegionPredictor],
    image: ImageInput,
    boxes: Sequence[BoxPrompt],
    layer: int,
    out_dir: Optional[Union[str, Path]] = None,
    overlay: bool = False,
) -> List[np.ndarray]:
    """
    Cross-attention heatmaps of one block, one (rows, cols) array per box.

    The class-token column is dropped and each row renormalized. With out_dir, writes
    attn_{image}_layer{l}_box{i}.png per box and one raw float sidecar container;
    overlay adds attn_{image}_layer{l}_box{i}_overlay.png blended over the image.

    Raises:
        RangeError: layer is not a valid block index
    """
    predictor = checkpoint if isinstance(checkpoint, RegionPredictor) else RegionPredictor(checkpoint)
    depth = predictor.head.config.depth
    if not 0 <= layer < depth:
        raise RangeError("Attention layer index out of range", details={"layer": layer, "depth": depth})
    if not boxes:
        return []

    records, grid_hw = predictor.attention(image, boxes)
    weights = records[layer].grid_weights()
    heatmaps = [row.reshape(grid_hw) for row in weights]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"attn_{image.id}_layer{layer}"
        for index, heatmap in enumerate(heatmaps):
            heatmap_to_image(heatmap).save(out_dir / f"{stem}_box{index}.png")
            if overlay:
                overlay_heatmap(image, heatmap).save(out_dir / f"{stem}_box{index}_overlay.png")
        write_array_container(
            out_dir / f"{stem}.rspt",
            {f"box{index}": heatmap.astype(np.float32) for index, heatmap in enumerate(heatmaps)},
            {"image_id": image.id, "layer": layer, "grid_hw": list(grid_hw),
             "boxes": [box.as_list() for box in boxes]},
        )
        logger.info(f"Wrote {len(heatmaps)} attention heatmaps for image {image.id} to {out_dir}")
    return heatmaps
