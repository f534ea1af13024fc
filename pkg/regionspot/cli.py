"""
regionspot/cli.py - Command-Line Entry Points

Subcommands:
- train  → run the staged schedule of a config or preset
- infer  → ranked predictions for GT boxes or external proposals
- eval   → AP report for a predictions file
- attn   → cross-attention heatmaps for boxes on one image

Every input is validated before anything is written under --out.
Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from pydantic import ValidationError

from regionspot.core.config import EvalOptions, RunConfig, get_settings, load_run_config
from regionspot.core.exceptions import ConfigValidationError, RegionSpotError, exit_code_for
from regionspot.core.logging import get_logger, set_run_id, setup_logging
from regionspot.data.datasets import ImageLoader, LabelSpace, load_annotations
from regionspot.models.encoders import BoxPrompt, load_image
from regionspot.schema import BoxesFile
from regionspot.services.checkpoint import load_checkpoint
from regionspot.services.evaluator import (
    ProposalSet,
    RegionPredictor,
    evaluate_recognition,
    export_attention,
    load_predictions,
    load_proposals,
    predictions_to_jsonl,
    render_report_table,
    write_report,
)
from regionspot.services.trainer import Trainer

logger = get_logger(__name__)


# =============================================================================
# ARGUMENT HELPERS
# =============================================================================

def _invalid(flag: str, message: str) -> ConfigValidationError:
    return ConfigValidationError(f"{flag}: {message}", errors=[{"field": flag, "message": message}])


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise _invalid(flag, "is required")
    resolved = Path(path)
    if not resolved.is_file():
        raise _invalid(flag, f"file not found: {resolved}")
    return resolved


def read_vocabulary(path: Path) -> List[str]:
    """One category per line, or a JSON list of names."""
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            names = json.loads(text)
        except json.JSONDecodeError as exc:
            raise _invalid("--vocab", f"malformed JSON: {exc.msg}") from exc
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise _invalid("--vocab", "JSON vocabulary must be a list of strings")
    else:
        names = [line.strip() for line in text.splitlines()]
    names = [name for name in names if name.strip()]
    if not names:
        raise _invalid("--vocab", "vocabulary is empty")
    return names


def read_boxes(spec: str) -> List[BoxPrompt]:
    """Boxes from a JSON file {"boxes": [[x1, y1, x2, y2], ...]} or inline "x1,y1,x2,y2;..."."""
    path = Path(spec)
    try:
        if path.is_file():
            rows = BoxesFile.model_validate_json(path.read_bytes()).boxes
        else:
            rows = [[float(v) for v in chunk.split(",")] for chunk in spec.split(";") if chunk.strip()]
    except (ValidationError, ValueError) as exc:
        raise _invalid("--boxes", f"cannot parse boxes: {exc}") from exc
    boxes = []
    for index, row in enumerate(rows):
        if len(row) != 4:
            raise _invalid("--boxes", f"box {index} needs 4 coordinates")
        try:
            boxes.append(BoxPrompt(*row).validate(index))
        except RegionSpotError as exc:
            raise _invalid("--boxes", exc.message) from exc
    return boxes


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_train(args: argparse.Namespace) -> int:
    config: RunConfig = load_run_config(args.config, seed=args.seed)
    logger.info(f"Training preset={config.preset or '-'} into {args.out}",
                extra={"extra_data": {"seed": config.seed, "stages": len(config.train.stages)}})
    checkpoint = Trainer(config, args.out).run()
    logger.info(f"Training finished at iteration {checkpoint.iteration}; checksum {checkpoint.checksum()[:12]}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    checkpoint_path = _require_file(args.checkpoint, "--checkpoint")
    annotations = _require_file(args.annotations, "--annotations")
    vocabulary = read_vocabulary(_require_file(args.vocab, "--vocab"))
    proposals_path = _require_file(args.proposals, "--proposals") if args.proposals else None

    predictor = RegionPredictor(load_checkpoint(checkpoint_path))
    records = load_annotations(annotations, image_root=args.image_root)
    proposals = load_proposals(proposals_path) if proposals_path else ProposalSet.from_records(records)

    loader = ImageLoader()
    predictions = []
    try:
        for record, image in zip(records, loader.load_many(records)):
            predictions += predictor.predict(image, proposals.get(record.image_id), vocabulary, args.top_k)
    finally:
        loader.close()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "predictions.jsonl").write_text(predictions_to_jsonl(predictions), encoding="utf-8")
    logger.info(f"Wrote {len(predictions)} region predictions for {len(records)} images")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    predictions_path = _require_file(args.predictions, "--predictions")
    annotations = _require_file(args.annotations, "--annotations")
    options = load_run_config(args.config).eval if args.config else EvalOptions()
    if args.mode:
        options = options.model_copy(update={"mode": args.mode})
    vocabulary = read_vocabulary(_require_file(args.vocab, "--vocab")) if args.vocab else None
    label_space = None
    if args.train_annotations:
        label_space = LabelSpace.from_records(
            load_annotations(_require_file(args.train_annotations, "--train-annotations"))
        )

    predictions = load_predictions(predictions_path)
    records = load_annotations(annotations, image_root=args.image_root)
    report = evaluate_recognition(predictions, records, label_space, options, vocabulary)
    write_report(report, args.out)
    print(render_report_table(report))
    return 0


def cmd_attn(args: argparse.Namespace) -> int:
    checkpoint_path = _require_file(args.checkpoint, "--checkpoint")
    image_path = _require_file(args.image, "--image")
    if not args.boxes:
        raise _invalid("--boxes", "is required")
    boxes = read_boxes(args.boxes)

    predictor = RegionPredictor(load_checkpoint(checkpoint_path))
    image = load_image(image_path).validate()
    heatmaps = export_attention(predictor, image, boxes, args.layer, out_dir=args.out, overlay=args.overlay)
    logger.info(f"Exported {len(heatmaps)} heatmaps of layer {args.layer}")
    return 0


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "attn": cmd_attn}


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="Directory receiving every output of the command")
    common.add_argument("--seed", type=int, default=None, help="Global seed")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR")
    common.add_argument("--log-json", action="store_true", help="JSON log lines on stderr")

    parser = argparse.ArgumentParser(prog="regionspot", description="Region recognition with frozen foundation encoders")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="Train the fusion head")
    train.add_argument("--config", required=True, help="Config JSON path or preset name (lite-toy, pro-toy)")

    infer = sub.add_parser("infer", parents=[common], help="Predict categories for boxes")
    infer.add_argument("--checkpoint")
    infer.add_argument("--annotations", help="COCO-style file listing images (and GT boxes)")
    infer.add_argument("--image-root", default=None)
    infer.add_argument("--proposals", default=None, help="JSONL proposals; GT boxes are used when omitted")
    infer.add_argument("--vocab", help="Category names, one per line or a JSON list")
    infer.add_argument("--top-k", type=int, default=None)

    evaluate = sub.add_parser("eval", parents=[common], help="Score predictions against annotations")
    evaluate.add_argument("--predictions")
    evaluate.add_argument("--annotations")
    evaluate.add_argument("--image-root", default=None)
    evaluate.add_argument("--train-annotations", default=None, help="Training annotations for r/c/f bucket counts")
    evaluate.add_argument("--vocab", default=None)
    evaluate.add_argument("--config", default=None, help="Config or preset supplying eval options")
    evaluate.add_argument("--mode", choices=["fixed_box", "detection"], default=None)

    attn = sub.add_parser("attn", parents=[common], help="Export cross-attention heatmaps")
    attn.add_argument("--checkpoint")
    attn.add_argument("--image")
    attn.add_argument("--boxes", help="JSON file or inline 'x1,y1,x2,y2;...' in normalized coordinates")
    attn.add_argument("--layer", type=int, default=0)
    attn.add_argument("--overlay", action="store_true", help="Also write heatmaps blended over the image")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, configure logging and dispatch.

    Returns:
        int: Exit code (0 success, 1 runtime failure, 2 validation failure)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    settings = get_settings()
    setup_logging(
        level=args.log_level or settings.LOG_LEVEL,
        json_format=args.log_json or settings.json_logs,
    )
    set_run_id()
    if args.seed is not None:
        torch.manual_seed(args.seed)

    try:
        return COMMANDS[args.command](args)
    except RegionSpotError as exc:
        code = exit_code_for(exc)
        logger.error(f"{args.command} failed: {exc}", extra={"extra_data": {"error_code": exc.error_code}})
        return code
    except Exception as exc:
        logger.exception(f"{args.command} failed unexpectedly: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
