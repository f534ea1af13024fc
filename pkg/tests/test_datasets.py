# Dataset Tests

"""
Tests for annotation ingestion, label spaces, batching and the synthetic fixture.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from regionspot.core.exceptions import AnnotationFormatError, ReferentialIntegrityError
from regionspot.data.datasets import (
    CocoAnnotationLoader,
    ImageLoader,
    LabelSpace,
    epoch_batches,
    load_annotations,
    merge_label_spaces,
    sample_batch,
)
from regionspot.data.synthetic import write_synthetic_dataset
from regionspot.models.encoders import normalize_category_name


def write_coco(path: Path, images, annotations, categories) -> Path:
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": categories}))
    return path


def image_entry(image_id, width=100, height=100):
    return {"id": image_id, "file_name": f"{image_id}.png", "width": width, "height": height}


@pytest.fixture
def three_image_file(tmp_path: Path) -> Path:
    """3 images, 7 boxes, categories cat x4 and dog x3."""
    boxes = {1: ["cat", "dog", "cat"], 2: ["dog", "cat"], 3: ["cat", "dog"]}
    annotations = []
    for image_id, names in boxes.items():
        for j, name in enumerate(names):
            annotations.append({"id": len(annotations) + 1, "image_id": image_id, "bbox": [10 * j, 5, 8, 8],
                                "category_id": 1 if name == "cat" else 2})
    return write_coco(tmp_path / "three.json", [image_entry(i) for i in boxes], annotations,
                      [{"id": 1, "name": "cat"}, {"id": 2, "name": "dog"}])


class TestCocoIngestion:
    """Tests for load_annotations."""

    def test_box_conversion(self, tmp_path):
        """Test COCO xywh to normalized corner conversion."""
        path = write_coco(tmp_path / "one.json", [image_entry(7, width=100, height=200)],
                          [{"id": 1, "image_id": 7, "bbox": [10, 20, 30, 40], "category_id": 3}],
                          [{"id": 3, "name": "person"}])
        records = load_annotations(path)
        assert len(records) == 1
        assert records[0].image_id == "7"
        assert records[0].boxes[0].as_list() == pytest.approx([0.1, 0.1, 0.4, 0.3])
        assert records[0].categories == ["person"]

    def test_empty_annotation_list(self, tmp_path):
        """Test that an empty annotation list loads no records."""
        path = write_coco(tmp_path / "empty.json", [image_entry(1)], [], [{"id": 1, "name": "cat"}])
        assert load_annotations(path) == []

    def test_hand_counted_fixture(self, three_image_file):
        """Test image and box counts of a hand-counted fixture."""
        loader = CocoAnnotationLoader(source="toy")
        records = loader.load(three_image_file)
        assert len(records) == 3
        assert sum(len(r.regions) for r in records) == 7
        space = LabelSpace.from_records(records)
        assert space.names == ["cat", "dog"]
        assert space.frequency("cat") == 4
        assert space.frequency("DOG") == 3
        assert records[0].key == "toy:1"
        assert loader.stats["regions"] == 7

    def test_zero_area_boxes_dropped(self, tmp_path):
        """Test that zero-area boxes are dropped and counted."""
        path = write_coco(tmp_path / "zero.json", [image_entry(1), image_entry(2)],
                          [{"id": 1, "image_id": 1, "bbox": [10, 10, 0, 5], "category_id": 1},
                           {"id": 2, "image_id": 2, "bbox": [10, 10, 5, 5], "category_id": 1}],
                          [{"id": 1, "name": "cat"}])
        loader = CocoAnnotationLoader()
        records = loader.load(path)
        assert [r.image_id for r in records] == ["2"]
        assert loader.stats["dropped_zero_area"] == 1
        assert loader.stats["images_without_regions"] == 1

    def test_malformed_json_reports_offset(self, tmp_path):
        """Test that malformed JSON reports its byte offset."""
        path = tmp_path / "bad.json"
        path.write_text('{"images": [}')
        with pytest.raises(AnnotationFormatError) as info:
            load_annotations(path)
        assert info.value.byte_offset == 12

    def test_non_utf8(self, tmp_path):
        """Test that invalid UTF-8 reports its byte offset."""
        path = tmp_path / "latin.json"
        path.write_bytes(b'{"images": "\xff"}')
        with pytest.raises(AnnotationFormatError) as info:
            load_annotations(path)
        assert info.value.byte_offset == 12

    def test_unknown_category(self, tmp_path):
        """Test that an unknown category id raises ReferentialIntegrityError."""
        path = write_coco(tmp_path / "dangling.json", [image_entry(1)],
                          [{"id": 1, "image_id": 1, "bbox": [1, 1, 5, 5], "category_id": 9}],
                          [{"id": 1, "name": "cat"}])
        with pytest.raises(ReferentialIntegrityError):
            load_annotations(path)

    def test_unknown_image(self, tmp_path):
        """Test that an unknown image id raises ReferentialIntegrityError."""
        path = write_coco(tmp_path / "dangling.json", [image_entry(1)],
                          [{"id": 1, "image_id": 2, "bbox": [1, 1, 5, 5], "category_id": 1}],
                          [{"id": 1, "name": "cat"}])
        with pytest.raises(ReferentialIntegrityError):
            load_annotations(path)


class TestLabelSpaces:
    """Tests for merge_label_spaces."""

    def test_self_merge_doubles_counts(self):
        """Test that merging a label space with itself doubles its counts."""
        space = LabelSpace(names=["cat", "dog"], counts={"cat": 3, "dog": 1})
        merged = merge_label_spaces([space, space])
        assert merged.names == ["cat", "dog"]
        assert merged.counts == {"cat": 6, "dog": 2}

    def test_case_fold_union(self):
        """Test that merged names are unioned case-insensitively."""
        merged = merge_label_spaces([LabelSpace(["cat", "dog"]), LabelSpace(["Dog", "fish"])])
        assert merged.names == ["cat", "dog", "fish"]

    def test_matches_set_union(self):
        """Test merged names against a set union."""
        spaces = [LabelSpace(["Car", "bus"]), LabelSpace(["BUS", "bike", "tram"]), LabelSpace(["tram", "car", "van"])]
        merged = merge_label_spaces(spaces)
        expected = {normalize_category_name(n) for s in spaces for n in s.names}
        assert {normalize_category_name(n) for n in merged.names} == expected
        assert len(merged) == len(expected)
        reversed_merge = merge_label_spaces(spaces[::-1])
        assert {normalize_category_name(n) for n in reversed_merge.names} == expected


class TestBatching:
    """Tests for deterministic epoch batches."""

    @pytest.fixture
    def ten_records(self, tmp_path):
        annotations = [{"id": i + 1, "image_id": i + 1, "bbox": [1, 1, 10, 10], "category_id": 1 + i % 3}
                       for i in range(10)]
        path = write_coco(tmp_path / "ten.json", [image_entry(i + 1) for i in range(10)], annotations,
                          [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}, {"id": 3, "name": "c"}])
        return load_annotations(path)

    def test_large_batch_holds_everything(self, ten_records):
        """Test that one oversized batch holds every record."""
        batches = epoch_batches(ten_records, batch_size=16, seed=0, epoch=0)
        assert len(batches) == 1
        assert sorted(item.record.image_id for item in batches[0].items) == sorted(r.image_id for r in ten_records)

    def test_same_seed_same_sequence(self, ten_records):
        """Test that the same seed and epoch give the same batches."""
        first = [[i.record.image_id for i in b.items] for b in epoch_batches(ten_records, 3, seed=4, epoch=2)]
        second = [[i.record.image_id for i in b.items] for b in epoch_batches(ten_records, 3, seed=4, epoch=2)]
        assert first == second

    def test_partition_matches_shuffle_oracle(self, ten_records):
        """Test batch order against a seeded permutation."""
        order = np.random.default_rng([0, 0]).permutation(10)
        expected = [[ten_records[i].image_id for i in order[s:s + 4]] for s in range(0, 10, 4)]
        batches = epoch_batches(ten_records, batch_size=4, seed=0, epoch=0)
        assert [[i.record.image_id for i in b.items] for b in batches] == expected
        assert [b.batch_id for b in batches] == ["e0-b0", "e0-b1", "e0-b2"]

    def test_targets_resolve_to_own_category(self, ten_records):
        """Test that every target index names the region's own category."""
        for batch in epoch_batches(ten_records, 4, seed=1, epoch=3):
            for item in batch.items:
                assert [batch.vocabulary[t] for t in item.targets] == item.record.categories

    def test_sample_batch_wraps(self, ten_records):
        """Test that batch indices wrap into the next epoch."""
        assert sample_batch(ten_records, 4, 0, 0, index=3).batch_id == "e0-b0"


class TestSyntheticData:
    """Tests for the synthetic shapes writer and image loading."""

    def test_writes_images_and_annotations(self, tmp_path):
        """Test that the synthetic writer produces images and annotations."""
        path = write_synthetic_dataset(tmp_path / "syn", num_images=3, regions_per_image=2, image_size=32, seed=5)
        records = load_annotations(path)
        assert len(records) == 3
        assert all(len(r.regions) == 2 for r in records)
        with Image.open(records[0].image_path) as image:
            assert image.size == (32, 32)

    def test_same_seed_same_bytes(self, tmp_path):
        """Test that the same seed writes identical files."""
        a = write_synthetic_dataset(tmp_path / "a", seed=3)
        b = write_synthetic_dataset(tmp_path / "b", seed=3)
        assert a.read_bytes() == b.read_bytes()
        assert (a.parent / "image_0000.png").read_bytes() == (b.parent / "image_0000.png").read_bytes()

    def test_threaded_loader_keeps_order(self, shapes_annotations):
        """Test that the threaded loader returns images in request order."""
        records = load_annotations(shapes_annotations)
        loader = ImageLoader(num_workers=3)
        try:
            images = loader.load_many(records)
        finally:
            loader.close()
        assert [image.id for image in images] == [r.image_id for r in records]
        assert all(0.0 <= image.pixels.min() and image.pixels.max() <= 1.0 for image in images)
