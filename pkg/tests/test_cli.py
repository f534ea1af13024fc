# CLI Tests

"""
End-to-end tests of the train, infer, eval and attn commands.
"""

import json
from pathlib import Path

import pytest

from regionspot.cli import main, read_boxes, read_vocabulary
from regionspot.core.exceptions import ConfigValidationError
from regionspot.data.datasets import load_annotations
from regionspot.schema import LabelScore, PredictionLine

VOCABULARY = ["red block", "green block", "blue block"]


@pytest.fixture
def trained_run(config_document, tmp_path) -> Path:
    """Zero-iteration training run; returns its output directory."""
    config_document["train"]["stages"][0]["iterations"] = 0
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_document))
    out = tmp_path / "train"
    assert main(["train", "--config", str(config_path), "--out", str(out)]) == 0
    return out


@pytest.fixture
def vocab_file(tmp_path) -> Path:
    path = tmp_path / "vocab.txt"
    path.write_text("\n".join(VOCABULARY) + "\n")
    return path


def annotations_of(run: Path) -> Path:
    return run / "data" / "shapes" / "annotations.json"


def infer(run: Path, vocab: Path, out: Path) -> int:
    return main(["infer", "--checkpoint", str(run / "final.rspt"), "--annotations", str(annotations_of(run)),
                 "--vocab", str(vocab), "--out", str(out)])


class TestTrainCommand:
    """Tests for `train`."""

    def test_zero_iterations(self, trained_run):
        """Test that a zero-iteration run writes a checkpoint and an empty log."""
        assert (trained_run / "final.rspt").is_file()
        assert (trained_run / "train_log.jsonl").read_text() == ""

    def test_unknown_key_exits_2_without_output(self, config_document, tmp_path):
        """Test that an unknown config key exits 2 before writing output."""
        config_document["train"]["bogus"] = 1
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(config_document))
        out = tmp_path / "out"
        assert main(["train", "--config", str(config_path), "--out", str(out)]) == 2
        assert not out.exists()

    def test_mismatched_widths_exit_2(self, config_document, tmp_path):
        """Test that an invalid fusion width exits 2."""
        config_document["fusion"]["c_dim"] = 48
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(config_document))
        assert main(["train", "--config", str(config_path), "--out", str(tmp_path / "out")]) == 2

    def test_missing_config_file(self, tmp_path):
        """Test that a missing config exits 2."""
        assert main(["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "out")]) == 2

    def test_missing_out_flag(self):
        """Test that omitting --out exits 2."""
        assert main(["train", "--config", "lite-toy"]) == 2


class TestInferCommand:
    """Tests for `infer`."""

    def test_output_is_reproducible(self, trained_run, vocab_file, tmp_path):
        """Test that two infer runs write identical predictions."""
        assert infer(trained_run, vocab_file, tmp_path / "a") == 0
        assert infer(trained_run, vocab_file, tmp_path / "b") == 0
        first = (tmp_path / "a" / "predictions.jsonl").read_bytes()
        assert first == (tmp_path / "b" / "predictions.jsonl").read_bytes()
        assert len(first.splitlines()) == 12

    def test_single_category_vocabulary(self, trained_run, tmp_path):
        """Test infer with a one-category JSON vocabulary."""
        vocab = tmp_path / "one.json"
        vocab.write_text(json.dumps(["green block"]))
        assert infer(trained_run, vocab, tmp_path / "one") == 0
        lines = [json.loads(l) for l in (tmp_path / "one" / "predictions.jsonl").read_text().splitlines()]
        assert {tuple(label["category"] for label in l["top"]) for l in lines} == {("green block",)}

    def test_missing_checkpoint(self, trained_run, vocab_file, tmp_path):
        """Test that a missing checkpoint exits 2 without output."""
        code = main(["infer", "--checkpoint", str(tmp_path / "nope.rspt"), "--annotations",
                     str(annotations_of(trained_run)), "--vocab", str(vocab_file), "--out", str(tmp_path / "x")])
        assert code == 2
        assert not (tmp_path / "x").exists()

    def test_proposals_file(self, trained_run, vocab_file, tmp_path):
        """Test infer over an external proposals file."""
        proposals = tmp_path / "proposals.jsonl"
        proposals.write_text('{"image_id": 1, "bbox": [0.0, 0.0, 0.5, 0.5], "score": 0.5}\n')
        code = main(["infer", "--checkpoint", str(trained_run / "final.rspt"), "--annotations",
                     str(annotations_of(trained_run)), "--vocab", str(vocab_file), "--proposals", str(proposals),
                     "--top-k", "2", "--out", str(tmp_path / "p")])
        assert code == 0
        lines = [json.loads(l) for l in (tmp_path / "p" / "predictions.jsonl").read_text().splitlines()]
        assert len(lines) == 1
        assert lines[0]["objectness"] == 0.5
        assert len(lines[0]["top"]) == 2


class TestEvalCommand:
    """Tests for `eval`."""

    def test_perfect_predictions_score_100(self, trained_run, tmp_path, capsys):
        """Test that perfect predictions report mAP 100."""
        annotations = annotations_of(trained_run)
        lines = [
            PredictionLine(image_id=r.image_id, box_index=i, box=box.as_list(),
                           top=[LabelScore(category=name, score=1.0)]).model_dump_json()
            for r in load_annotations(annotations)
            for i, (box, name) in enumerate(zip(r.boxes, r.categories))
        ]
        predictions = tmp_path / "perfect.jsonl"
        predictions.write_text("\n".join(lines) + "\n")
        out = tmp_path / "eval"
        code = main(["eval", "--predictions", str(predictions), "--annotations", str(annotations), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["map"] * 100 == pytest.approx(100.0)
        assert "100.0" in capsys.readouterr().out

    def test_eval_after_infer(self, trained_run, vocab_file, tmp_path):
        """Test eval on infer output."""
        assert infer(trained_run, vocab_file, tmp_path / "inf") == 0
        code = main(["eval", "--predictions", str(tmp_path / "inf" / "predictions.jsonl"),
                     "--annotations", str(annotations_of(trained_run)), "--vocab", str(vocab_file),
                     "--out", str(tmp_path / "eval")])
        assert code == 0
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert 0.0 <= report["map"] <= 1.0
        assert report["missing_categories"] == []


class TestDeskOverfit:
    """Full train, infer and eval chain on the lite preset."""

    def test_lite_preset_overfits_shapes(self, vocab_file, tmp_path):
        """Test that lite-toy learns 12 regions of 3 categories to at least 95 mAP within 2000 iterations."""
        config_path = tmp_path / "lite.json"
        config_path.write_text(json.dumps({
            "preset": "lite-toy",
            "train": {"stages": [{"datasets": ["shapes"], "iterations": 2000}], "eval_every": 0},
        }))
        run = tmp_path / "train"
        assert main(["train", "--config", str(config_path), "--out", str(run)]) == 0
        assert len((run / "train_log.jsonl").read_text().splitlines()) == 2000

        records = load_annotations(annotations_of(run))
        assert len(records) == 4
        assert sum(len(record.boxes) for record in records) == 12
        assert {name for record in records for name in record.categories} == set(VOCABULARY)

        assert infer(run, vocab_file, tmp_path / "inf") == 0
        code = main(["eval", "--predictions", str(tmp_path / "inf" / "predictions.jsonl"),
                     "--annotations", str(annotations_of(run)), "--vocab", str(vocab_file),
                     "--out", str(tmp_path / "eval")])
        assert code == 0
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert report["map"] * 100 >= 95.0


class TestAttnCommand:
    """Tests for `attn`."""

    def attn(self, run, out, boxes, layer="0"):
        image = run / "data" / "shapes" / "image_0000.png"
        return main(["attn", "--checkpoint", str(run / "final.rspt"), "--image", str(image),
                     "--boxes", boxes, "--layer", layer, "--out", str(out)])

    def test_writes_heatmaps(self, trained_run, tmp_path):
        """Test the PNG names and sidecar written by attn."""
        assert self.attn(trained_run, tmp_path / "attn", "0.1,0.1,0.4,0.5;0.5,0.5,0.9,0.9") == 0
        names = sorted(p.name for p in (tmp_path / "attn").glob("*.png"))
        assert names == ["attn_image_0000_layer0_box0.png", "attn_image_0000_layer0_box1.png"]
        assert (tmp_path / "attn" / "attn_image_0000_layer0.rspt").is_file()

    def test_layer_out_of_range(self, trained_run, tmp_path):
        """Test that an out-of-range layer exits 1."""
        assert self.attn(trained_run, tmp_path / "attn", "0.1,0.1,0.4,0.5", layer="1") == 1

    def test_invalid_box(self, trained_run, tmp_path):
        """Test that an invalid box exits 2."""
        assert self.attn(trained_run, tmp_path / "attn", "0.5,0.1,0.4,0.5") == 2


class TestArgumentFiles:
    """Tests for vocabulary and box parsing."""

    def test_vocabulary_text_skips_blank_lines(self, tmp_path):
        """Test that blank vocabulary lines are skipped."""
        path = tmp_path / "v.txt"
        path.write_text("cat\n\n dog \n")
        assert read_vocabulary(path) == ["cat", "dog"]

    def test_empty_vocabulary(self, tmp_path):
        """Test that an empty vocabulary file is rejected."""
        path = tmp_path / "v.txt"
        path.write_text("\n")
        with pytest.raises(ConfigValidationError):
            read_vocabulary(path)

    def test_boxes_file(self, tmp_path):
        """Test reading boxes from a JSON file."""
        path = tmp_path / "boxes.json"
        path.write_text(json.dumps({"boxes": [[0.1, 0.2, 0.3, 0.4]]}))
        assert [b.as_list() for b in read_boxes(str(path))] == [pytest.approx([0.1, 0.2, 0.3, 0.4])]

    def test_box_with_three_values(self):
        """Test that a box with three values is rejected."""
        with pytest.raises(ConfigValidationError):
            read_boxes("0.1,0.2,0.3")
