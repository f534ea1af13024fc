# Trainer Tests

"""
Tests for staged training, the learning-rate schedule and checkpoint containers.
"""

import json
import struct
import warnings

import numpy as np
import pytest
import torch

from regionspot.core.exceptions import (
    CheckpointError,
    DatasetLoadError,
    NonFiniteLossError,
    ShapeError,
    UnsupportedVersionError,
)
from regionspot.data.datasets import Batch, ImageLoader, epoch_batches
from regionspot.models.alignment import EmptyBatchWarning
from regionspot.models.fusion import FusionConfig
from regionspot.models.head import RegionSpotHead
from regionspot.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from regionspot.services.trainer import FINAL_CHECKPOINT, TRAIN_LOG, Trainer, resolve_dataset, run_training


class ClosingImageLoader(ImageLoader):
    """ImageLoader that counts close calls."""

    closed = 0

    def close(self) -> None:
        self.closed += 1
        super().close()


def first_batch(trainer: Trainer) -> Batch:
    records = trainer.load_datasets()["shapes"]
    return epoch_batches(records, trainer.config.train.batch_size, trainer.config.train.seed, 0)[0]


def head_state(head: RegionSpotHead):
    return {name: value.detach().clone() for name, value in head.state_dict().items()}


def read_log(out_dir):
    return [json.loads(line) for line in (out_dir / TRAIN_LOG).read_text().splitlines()]


class TestTrainStep:
    """Tests for single optimizer steps."""

    def test_zero_lr_leaves_parameters(self, make_config, tmp_path):
        """Test that a zero learning rate leaves every parameter unchanged."""
        trainer = Trainer(make_config(train={"base_lr": 0.0}), tmp_path)
        before = head_state(trainer.head)
        result = trainer.train_step(first_batch(trainer))
        assert np.isfinite(result.loss)
        after = trainer.head.state_dict()
        assert all(torch.equal(before[name], after[name]) for name in before)

    def test_step_moves_fusion_but_not_backbone(self, make_config, tmp_path):
        """Test that a step updates fusion weights and leaves the backbone alone."""
        trainer = Trainer(make_config(), tmp_path)
        backbone = trainer.encoders.checksum()
        before = head_state(trainer.head)
        trainer.train_step(first_batch(trainer))
        after = trainer.head.state_dict()
        changed = [name for name in before if not torch.equal(before[name], after[name])]
        assert any(name.startswith("fusion.") for name in changed)
        assert trainer.encoders.checksum() == backbone

    def test_empty_batch_is_skipped(self, make_config, tmp_path):
        """Test that an empty batch warns and leaves parameters unchanged."""
        trainer = Trainer(make_config(), tmp_path)
        before = head_state(trainer.head)
        with pytest.warns(EmptyBatchWarning):
            result = trainer.train_step(Batch(batch_id="empty", items=[], vocabulary=[]))
        assert result.loss == 0.0
        assert trainer.stats["empty_batches"] == 1
        assert all(torch.equal(before[n], trainer.head.state_dict()[n]) for n in before)

    def test_empty_batch_consumes_schedule_iteration_silently(self, make_config, tmp_path):
        """Test that an empty first batch advances the lr schedule without a scheduler-order warning."""
        trainer = Trainer(make_config(train={"lr_decay_points": [1], "decay_factor": 0.1}), tmp_path)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = trainer.train_step(Batch(batch_id="empty", items=[], vocabulary=[]))
        assert result.lr == pytest.approx(3e-3)
        assert trainer.current_lr == pytest.approx(3e-4)
        assert any(issubclass(w.category, EmptyBatchWarning) for w in caught)
        assert not [w for w in caught if "lr_scheduler.step()" in str(w.message)]

    def test_negative_boxes_are_deterministic(self, make_config, tmp_path):
        """Test that seeded negative boxes give identical losses."""
        losses = []
        for run in ("a", "b"):
            trainer = Trainer(make_config(train={"negative_boxes": 2}), tmp_path / run)
            losses.append(trainer.train_step(first_batch(trainer)).loss)
        assert losses[0] == losses[1]

    def test_non_finite_loss_dumps_batch(self, make_config, tmp_path):
        """Test that a NaN loss dumps the batch and raises NonFiniteLossError."""
        trainer = Trainer(make_config(), tmp_path)
        with torch.no_grad():
            trainer.head.logit_scale.fill_(float("nan"))
        batch = first_batch(trainer)
        with pytest.raises(NonFiniteLossError) as info:
            trainer.train_step(batch)
        assert info.value.batch_id == batch.batch_id
        dump = json.loads(open(info.value.dump_path, encoding="utf-8").read())
        assert dump["batch_id"] == batch.batch_id
        assert dump["stage"] == 0 and dump["iteration"] == 0

    def test_features_are_cached(self, make_config, tmp_path):
        """Test that frozen features are computed once per record."""
        trainer = Trainer(make_config(), tmp_path)
        batch = first_batch(trainer)
        trainer.train_step(batch)
        trainer.train_step(batch)
        assert trainer.stats["feature_misses"] == len(batch)
        assert trainer.stats["feature_hits"] == len(batch)


class TestTrainingRun:
    """Tests for full staged runs."""

    def test_loss_halves_on_shapes(self, make_config, tmp_path):
        """Test that the loss halves within 200 iterations on shapes."""
        config = make_config(train={"stages": [{"datasets": ["shapes"], "iterations": 200}]})
        run_training(config, tmp_path)
        losses = [entry["loss"] for entry in read_log(tmp_path)]
        assert len(losses) == 200
        assert np.mean(losses[-10:]) <= 0.5 * np.mean(losses[:10])

    def test_zero_iterations_returns_initialization(self, make_config, tmp_path):
        """Test that zero iterations return the seeded initialization."""
        config = make_config(train={"stages": [{"datasets": ["shapes"], "iterations": 0}]})
        final = run_training(config, tmp_path)
        fresh = RegionSpotHead(config.fusion, d_loc=16, d_vil=32, seed=config.seed).state_dict()
        assert final.iteration == 0
        assert all(np.array_equal(final.parameters[name], fresh[name].numpy()) for name in fresh)
        assert (tmp_path / FINAL_CHECKPOINT).is_file()
        assert read_log(tmp_path) == []

    def test_identical_runs_give_identical_checkpoints(self, make_config, tmp_path):
        """Test that identical runs write byte-identical checkpoints."""
        config = make_config(train={"stages": [{"datasets": ["shapes"], "iterations": 3}], "negative_boxes": 1})
        first = run_training(config, tmp_path / "a")
        second = run_training(config, tmp_path / "b")
        assert first.checksum() == second.checksum()
        assert (tmp_path / "a" / FINAL_CHECKPOINT).read_bytes() == (tmp_path / "b" / FINAL_CHECKPOINT).read_bytes()

    def test_schedule_recoverable_from_log(self, make_config, tmp_path):
        """Test the step-decay schedule from logged learning rates."""
        base = 3e-3
        config = make_config(train={
            "stages": [{"datasets": ["shapes"], "iterations": 6}],
            "lr_decay_points": [2, 4],
            "decay_factor": 0.1,
            "base_lr": base,
        })
        run_training(config, tmp_path)
        for entry in read_log(tmp_path):
            drops = sum(1 for point in (2, 4) if point <= entry["iter"])
            assert entry["lr"] == pytest.approx(base * 0.1 ** drops, rel=1e-9)

    def test_stages_reset_optimizer_and_name_checkpoints(self, make_config, tmp_path):
        """Test optimizer reset and checkpoint names across stages."""
        config = make_config(train={
            "stages": [{"datasets": ["shapes"], "iterations": 2}, {"datasets": ["shapes"], "iterations": 3}],
            "eval_every": 2,
        })
        trainer = Trainer(config, tmp_path)
        final = trainer.run()
        steps = {int(state["step"]) for state in trainer.optimizer.state.values()}
        assert steps == {3}
        assert final.stage == 1
        assert final.iteration == 5
        names = sorted(path.name for path in tmp_path.glob("*.rspt"))
        assert names == ["final.rspt", "stage0_iter2.rspt", "stage1_iter2.rspt", "stage1_iter3.rspt"]
        assert [entry["stage"] for entry in read_log(tmp_path)] == [0, 0, 1, 1, 1]
        assert [entry["iter"] for entry in read_log(tmp_path)] == [0, 1, 0, 1, 2]

    def test_missing_dataset_fails_before_training(self, make_config, tmp_path):
        """Test that a missing dataset fails before anything is written."""
        config = make_config(
            train={"stages": [{"datasets": ["shapes"], "iterations": 2},
                              {"datasets": ["absent"], "iterations": 2}]},
            datasets={"absent": {"annotations": str(tmp_path / "nope.json")}},
        )
        out_dir = tmp_path / "run"
        with pytest.raises(DatasetLoadError):
            Trainer(config, out_dir).run()
        assert not (out_dir / TRAIN_LOG).exists()
        assert not list(out_dir.glob("*.rspt"))

    def test_loader_closed_when_training_fails(self, make_config, tmp_path):
        """Test that a failing run still shuts the image loader's thread pool down."""
        loader = ClosingImageLoader(num_workers=2)
        trainer = Trainer(make_config(), tmp_path, loader=loader)
        with torch.no_grad():
            trainer.head.logit_scale.fill_(float("nan"))
        with pytest.raises(NonFiniteLossError):
            trainer.run()
        assert loader.closed == 1
        assert loader._executor is None

    def test_missing_image_files(self, shapes_annotations, make_config):
        """Test that missing image files raise DatasetLoadError."""
        (shapes_annotations.parent / "image_0001.png").unlink()
        source = make_config(datasets={"real": {"annotations": str(shapes_annotations)}}).datasets["real"]
        with pytest.raises(DatasetLoadError) as info:
            resolve_dataset("real", source, shapes_annotations.parent)
        assert info.value.details["first_missing"].endswith("image_0001.png")


class TestCheckpoint:
    """Tests for the checkpoint container."""

    @pytest.fixture
    def trained(self, make_config, tmp_path):
        trainer = Trainer(make_config(), tmp_path)
        trainer.train_step(first_batch(trainer))
        return trainer

    def test_round_trip_is_bit_exact(self, trained, tmp_path, random_image):
        """Test that save and load reproduce parameters bit for bit."""
        snapshot = trained.snapshot()
        path = save_checkpoint(snapshot, tmp_path / "round.rspt")
        loaded = load_checkpoint(path)
        assert loaded.to_bytes() == snapshot.to_bytes()
        assert loaded.parameters.keys() == snapshot.parameters.keys()
        assert all(loaded.parameters[k].tobytes() == snapshot.parameters[k].tobytes() for k in snapshot.parameters)

        tokens = torch.as_tensor(np.random.default_rng(0).standard_normal((3, 16)), dtype=torch.float32)
        memory = trained.head.fusion.build_memory(trained.encoders.vil.encode_vil_image(random_image))
        text = torch.eye(32)[:5]
        trained.head.eval()
        with torch.no_grad():
            expected = trained.head(tokens, memory, text)[0]
            actual = loaded.build_head()(tokens, memory, text)[0]
        assert torch.equal(expected, actual)

    def test_optimizer_state_restores(self, trained):
        """Test that optimizer moments survive a round trip."""
        snapshot = trained.snapshot()
        head = snapshot.build_head()
        optimizer = torch.optim.AdamW(head.parameters(), lr=1.0)
        optimizer.load_state_dict(snapshot.optimizer_state_dict())
        original = trained.optimizer.state_dict()["state"]
        restored = optimizer.state_dict()["state"]
        assert original.keys() == restored.keys()
        for index in original:
            assert torch.equal(original[index]["exp_avg"], restored[index]["exp_avg"])
        assert optimizer.param_groups[0]["lr"] == trained.optimizer.param_groups[0]["lr"]

    def test_mismatched_fusion_leaves_model_untouched(self, trained):
        """Test that a shape mismatch raises ShapeError without loading anything."""
        snapshot = trained.snapshot()
        other = RegionSpotHead(FusionConfig(depth=2, c_dim=32, num_heads=4), d_loc=16, d_vil=32, seed=9)
        before = head_state(other)
        with pytest.raises(ShapeError):
            snapshot.apply_to(other)
        assert all(torch.equal(before[n], other.state_dict()[n]) for n in before)

    def test_unknown_version_rejected(self, trained, tmp_path):
        """Test that an unknown container version is rejected."""
        raw = bytearray(trained.snapshot().to_bytes())
        struct.pack_into("<I", raw, 4, 99)
        with pytest.raises(UnsupportedVersionError):
            Checkpoint.from_bytes(bytes(raw))

    def test_bad_magic_rejected(self, trained):
        """Test that a foreign file is rejected."""
        raw = b"XXXX" + trained.snapshot().to_bytes()[4:]
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(raw)

    def test_truncated_container(self, trained):
        """Test that a truncated container raises CheckpointError."""
        raw = trained.snapshot().to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(raw[:-8])

    def test_missing_file(self, tmp_path):
        """Test that a missing checkpoint raises CheckpointError."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.rspt")


class TestAblationAxes:
    """Tap points, depths and the class-token toggle all train end to end."""

    @pytest.mark.parametrize("tap", ["prompt_encoder", "transformer_decoder", "mlp"])
    def test_tap_points(self, make_config, tmp_path, tap):
        """Test training from every localization tap."""
        config = make_config(source_tap=tap, train={"stages": [{"datasets": ["shapes"], "iterations": 2}]})
        final = run_training(config, tmp_path)
        assert final.source_tap.value == tap

    @pytest.mark.parametrize("depth", [1, 3, 6])
    def test_depths(self, make_config, tmp_path, depth):
        """Test training at several fusion depths."""
        config = make_config(fusion={"depth": depth}, train={"stages": [{"datasets": ["shapes"], "iterations": 2}]})
        assert run_training(config, tmp_path).fusion_config.depth == depth

    def test_without_class_token(self, make_config, tmp_path):
        """Test training without the class token."""
        config = make_config(fusion={"use_class_token": False},
                             train={"stages": [{"datasets": ["shapes"], "iterations": 2}]})
        assert run_training(config, tmp_path).fusion_config.use_class_token is False

    def test_almost_every_fusion_weight_moves(self, make_config, tmp_path):
        """Test that 500 steps move almost every fusion weight and no backbone weight."""
        config = make_config(train={"stages": [{"datasets": ["shapes"], "iterations": 500}]})
        trainer = Trainer(config, tmp_path)
        before = head_state(trainer.head)
        backbone = trainer.encoders.checksum()
        trainer.run()
        after = trainer.head.state_dict()
        changed = sum(int((before[n] != after[n]).sum()) for n in before if n.startswith("fusion."))
        total = sum(before[n].numel() for n in before if n.startswith("fusion."))
        assert changed / total >= 0.99
        assert trainer.encoders.checksum() == backbone
