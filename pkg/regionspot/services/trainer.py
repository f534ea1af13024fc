"""
regionspot/services/trainer.py - Staged Training over Frozen Encoders

Only the fusion head and the logit scale are optimized. Encoder outputs are pure
functions of (image, boxes, tap), so they are computed once per record and cached.
"""

import json
import threading
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from regionspot.core.config import DatasetSource, RunConfig
from regionspot.core.exceptions import DatasetLoadError, NonFiniteLossError, RegionSpotError
from regionspot.core.logging import get_logger
from regionspot.data.datasets import AnnotationRecord, Batch, BatchItem, ImageLoader, epoch_batches, load_annotations
from regionspot.data.synthetic import write_synthetic_dataset
from regionspot.models.alignment import build_targets, focal_loss
from regionspot.models.encoders import BoxPrompt, EncoderSuite, ImageInput, build_toy_encoders
from regionspot.models.head import RegionSpotHead
from regionspot.schema import TrainLogEntry
from regionspot.services.checkpoint import Checkpoint, save_checkpoint

logger = get_logger(__name__)

FINAL_CHECKPOINT = "final.rspt"
TRAIN_LOG = "train_log.jsonl"


@dataclass
class TrainStepResult:
    loss: float
    lr: float
    stage: int
    iteration: int
    batch_id: str
    num_regions: int


@dataclass
class CachedFeatures:
    image: ImageInput
    position_tokens: torch.Tensor
    memory: torch.Tensor


# =============================================================================
# DATASET RESOLUTION
# =============================================================================

def resolve_dataset(dataset_id: str, source: DatasetSource, data_dir: Path) -> List[AnnotationRecord]:
    """
    Load one configured dataset, generating synthetic ones under data_dir.

    Raises:
        DatasetLoadError: Annotation or image files are missing or malformed
    """
    try:
        if source.synthetic is not None:
            spec = source.synthetic
            annotations = write_synthetic_dataset(
                data_dir / dataset_id,
                num_images=spec.num_images,
                regions_per_image=spec.regions_per_image,
                categories=spec.categories,
                image_size=spec.image_size,
                seed=spec.seed,
            )
            records = load_annotations(annotations, source=dataset_id)
        else:
            records = load_annotations(source.annotations, image_root=source.image_root, source=dataset_id)
    except (RegionSpotError, OSError) as exc:
        raise DatasetLoadError(
            f"Dataset '{dataset_id}' could not be loaded: {exc}",
            details={"dataset": dataset_id, "cause": type(exc).__name__},
        ) from exc

    missing = [record.image_path for record in records if not Path(record.image_path).is_file()]
    if missing:
        raise DatasetLoadError(
            f"Dataset '{dataset_id}' references {len(missing)} missing image files",
            details={"dataset": dataset_id, "first_missing": missing[0]},
        )
    if not records:
        raise DatasetLoadError(f"Dataset '{dataset_id}' has no image with a usable region",
                               details={"dataset": dataset_id})
    return records


# =============================================================================
# TRAINER
# =============================================================================

class Trainer:
    """
    Runs the configured stages sequentially, carrying parameters forward.

    The optimizer (AdamW) and its step-decay schedule are rebuilt at every stage
    boundary, so moment estimates never leak from one stage into the next.
    """

    def __init__(
        self,
        config: RunConfig,
        out_dir: Union[str, Path],
        encoders: Optional[EncoderSuite] = None,
        loader: Optional[ImageLoader] = None,
    ):
        self.config = config
        self.out_dir = Path(out_dir)
        self.encoders = encoders or build_toy_encoders(config.encoder)
        self.loader = loader or ImageLoader()
        self.head = RegionSpotHead(
            config.fusion,
            d_loc=config.encoder.d_loc,
            d_vil=config.encoder.d_vil,
            temperature_init=config.alignment.temperature_init,
            learn_temperature=config.alignment.learn_temperature,
            seed=config.seed,
        )
        self.generator = torch.Generator().manual_seed(config.train.seed)

        self.optimizer: Optional[torch.optim.AdamW] = None
        self.scheduler: Optional[torch.optim.lr_scheduler.MultiStepLR] = None
        self.stage_index = 0
        self.stage_iteration = 0
        self.global_iteration = 0

        self._features: Dict[str, CachedFeatures] = {}
        self._text: Dict[Tuple[str, ...], torch.Tensor] = {}
        self._cache_lock = threading.RLock()
        self.stats = {"feature_hits": 0, "feature_misses": 0, "steps": 0, "empty_batches": 0}

    # -------------------------------------------------------------------------
    # Schedule
    # -------------------------------------------------------------------------

    def start_stage(self, stage_index: int) -> None:
        """Fresh AdamW plus MultiStepLR for a stage."""
        train = self.config.train
        stage = train.stages[stage_index]
        self.optimizer = torch.optim.AdamW(
            [p for p in self.head.parameters() if p.requires_grad],
            lr=train.base_lr,
            betas=tuple(train.betas),
            weight_decay=train.weight_decay,
        )
        milestones = train.decay_points_for(stage)
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, milestones=milestones, gamma=train.decay_factor
        )
        self.stage_index = stage_index
        self.stage_iteration = 0
        logger.info(
            f"Stage {stage_index}: optimizer state reset",
            extra={"extra_data": {
                "stage": stage_index,
                "datasets": stage.datasets,
                "iterations": stage.iterations,
                "decay_points": milestones,
                "base_lr": train.base_lr,
            }},
        )

    @property
    def current_lr(self) -> float:
        if self.optimizer is None:
            return self.config.train.base_lr
        return float(self.optimizer.param_groups[0]["lr"])

    # -------------------------------------------------------------------------
    # Frozen features
    # -------------------------------------------------------------------------

    def _ensure_features(self, items: Sequence[BatchItem]) -> List[CachedFeatures]:
        with self._cache_lock:
            missing = [item.record for item in items if item.record.key not in self._features]
        images = self.loader.load_many(missing) if missing else []

        tap = self.config.source_tap
        for record, image in zip(missing, images):
            tokens = self.encoders.localization.encode_localization(image, record.boxes, tap)
            feature_map = self.encoders.vil.encode_vil_image(image)
            cached = CachedFeatures(
                image=image,
                position_tokens=torch.as_tensor(tokens.tokens, dtype=self.head.fusion.dtype),
                memory=self.head.fusion.build_memory(feature_map),
            )
            with self._cache_lock:
                self._features[record.key] = cached

        with self._cache_lock:
            self.stats["feature_misses"] += len(missing)
            self.stats["feature_hits"] += len(items) - len(missing)
            return [self._features[item.record.key] for item in items]

    def _text_embeddings(self, vocabulary: Sequence[str]) -> torch.Tensor:
        key = tuple(vocabulary)
        if key not in self._text:
            table = self.encoders.text.encode_text(list(vocabulary), self.config.alignment.effective_template)
            self._text[key] = torch.as_tensor(table.embeddings, dtype=self.head.fusion.dtype)
        return self._text[key]

    def _negative_boxes(self, count: int) -> List[BoxPrompt]:
        if count == 0:
            return []
        corner = torch.rand((count, 2), generator=self.generator, dtype=torch.float64) * 0.8
        size = 0.05 + torch.rand((count, 2), generator=self.generator, dtype=torch.float64) * 0.15
        return [
            BoxPrompt(float(x), float(y), float(x + w), float(y + h))
            for (x, y), (w, h) in zip(corner.tolist(), size.tolist())
        ]

    # -------------------------------------------------------------------------
    # Step
    # -------------------------------------------------------------------------

    def _dump_batch(self, batch: Batch, loss: float) -> Path:
        path = self.out_dir / "diagnostics" / f"{batch.batch_id}-stage{self.stage_index}-iter{self.stage_iteration}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        document = {
            "batch_id": batch.batch_id,
            "stage": self.stage_index,
            "iteration": self.stage_iteration,
            "loss": repr(loss),
            "vocabulary": batch.vocabulary,
            "items": [
                {"record": item.record.key, "boxes": [box.as_list() for box in item.boxes], "targets": item.targets}
                for item in batch.items
            ],
            "logit_scale": float(self.head.logit_scale.detach()),
        }
        path.write_text(json.dumps(document, indent=2), encoding="utf-8")
        return path

    def train_step(self, batch: Batch) -> TrainStepResult:
        """
        One optimizer step on a batch: fusion forward, matching logits, focal loss.

        Raises:
            NonFiniteLossError: Loss is NaN or infinite; the batch is dumped first
        """
        if self.optimizer is None:
            self.start_stage(self.stage_index)
        lr = self.current_lr
        alignment = self.config.alignment

        if not batch.items or not batch.vocabulary:
            self.stats["empty_batches"] += 1
            loss = focal_loss(torch.zeros((0, 0)), torch.zeros((0, 0)))
            # A skipped batch still consumes one schedule iteration.
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message=r"Detected call of `lr_scheduler.step\(\)`")
                self.scheduler.step()
            return self._finish_step(batch, float(loss), lr)

        self.head.train()
        features = self._ensure_features(batch.items)
        text = self._text_embeddings(batch.vocabulary)
        num_categories = len(batch.vocabulary)

        pairs = []
        target_rows = []
        for item, cached in zip(batch.items, features):
            tokens = cached.position_tokens
            indices = list(item.targets)
            negatives = self._negative_boxes(self.config.train.negative_boxes)
            if negatives:
                extra = self.encoders.localization.encode_localization(cached.image, negatives, self.config.source_tap)
                tokens = torch.cat([tokens, torch.as_tensor(extra.tokens, dtype=tokens.dtype)], dim=0)
                indices += [-1] * len(negatives)
            pairs.append((tokens, cached.memory))
            target_rows.append(build_targets(indices, num_categories, dtype=tokens.dtype))

        self.optimizer.zero_grad(set_to_none=True)
        logits = torch.cat(self.head.forward_batch(pairs, text), dim=0)
        loss = focal_loss(logits, torch.cat(target_rows, dim=0), alpha=alignment.focal_alpha, gamma=alignment.focal_gamma)

        value = float(loss.detach())
        if not np.isfinite(value):
            dump = self._dump_batch(batch, value)
            logger.error(f"Non-finite loss on batch {batch.batch_id}; dumped to {dump}")
            raise NonFiniteLossError(
                f"Loss became {value} on batch {batch.batch_id}", batch_id=batch.batch_id, dump_path=str(dump)
            )

        loss.backward()
        self.optimizer.step()
        self.scheduler.step()
        return self._finish_step(batch, value, lr)

    def _finish_step(self, batch: Batch, loss: float, lr: float) -> TrainStepResult:
        result = TrainStepResult(
            loss=loss,
            lr=lr,
            stage=self.stage_index,
            iteration=self.stage_iteration,
            batch_id=batch.batch_id,
            num_regions=batch.num_regions,
        )
        self.stage_iteration += 1
        self.global_iteration += 1
        self.stats["steps"] += 1
        return result

    # -------------------------------------------------------------------------
    # Run
    # -------------------------------------------------------------------------

    def snapshot(self) -> Checkpoint:
        """Detached copy of the current parameters and optimizer state."""
        return Checkpoint.from_model(
            self.head,
            encoder_spec=self.config.encoder,
            alignment=self.config.alignment,
            source_tap=self.config.source_tap,
            optimizer=self.optimizer,
            iteration=self.global_iteration,
            stage=self.stage_index,
            generator=self.generator,
            train_config=self.config.train.model_dump(mode="json"),
        )

    def load_datasets(self) -> Dict[str, List[AnnotationRecord]]:
        """Load every dataset any stage names, before any optimization."""
        needed: List[str] = []
        for stage in self.config.train.stages:
            needed += [d for d in stage.datasets if d not in needed]
        data_dir = self.out_dir / "data"
        loaded = {name: resolve_dataset(name, self.config.datasets[name], data_dir) for name in needed}
        logger.info(
            f"Loaded {len(loaded)} datasets",
            extra={"extra_data": {name: len(records) for name, records in loaded.items()}},
        )
        return loaded

    def run(self) -> Checkpoint:
        """
        Execute all stages and return the final checkpoint.

        Writes stage{s}_iter{t}.rspt every eval_every iterations and at each stage end,
        final.rspt at the end, and one train_log.jsonl line per step.
        """
        try:
            return self._run_stages()
        finally:
            self.loader.close()

    def _run_stages(self) -> Checkpoint:
        datasets = self.load_datasets()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        backbone_checksum = self.encoders.checksum()
        logger.info(
            "Parameter budget",
            extra={"extra_data": {
                "trainable_parameters": self.head.trainable_parameter_count(),
                "backbone_parameters": self.encoders.parameter_count(),
            }},
        )

        train = self.config.train
        epoch = 0
        with open(self.out_dir / TRAIN_LOG, "w", encoding="utf-8") as log_file:
            for stage_index, stage in enumerate(train.stages):
                records = [record for name in stage.datasets for record in datasets[name]]
                self.start_stage(stage_index)
                pending: Deque[Batch] = deque()

                for _ in range(stage.iterations):
                    if not pending:
                        pending.extend(epoch_batches(records, train.batch_size, train.seed, epoch))
                        epoch += 1
                    result = self.train_step(pending.popleft())
                    entry = TrainLogEntry(iter=result.iteration, loss=result.loss, lr=result.lr, stage=stage_index)
                    log_file.write(entry.model_dump_json() + "\n")

                    if train.eval_every and self.stage_iteration % train.eval_every == 0:
                        log_file.flush()
                        save_checkpoint(self.snapshot(), self.out_dir / f"stage{stage_index}_iter{self.stage_iteration}.rspt")

                save_checkpoint(self.snapshot(), self.out_dir / f"stage{stage_index}_iter{self.stage_iteration}.rspt")
                logger.info(
                    f"Stage {stage_index} finished after {stage.iterations} iterations",
                    extra={"extra_data": {"lr": self.current_lr, **self.stats}},
                )

        if self.encoders.checksum() != backbone_checksum:
            raise RegionSpotError("Backbone parameters changed during training", error_code="FREEZE_VIOLATION")

        final = self.snapshot()
        save_checkpoint(final, self.out_dir / FINAL_CHECKPOINT)
        return final


def run_training(
    config: RunConfig, out_dir: Union[str, Path], encoders: Optional[EncoderSuite] = None
) -> Checkpoint:
    """Train per config into out_dir; returns the final checkpoint."""
    return Trainer(config, out_dir, encoders=encoders).run()


