"""Tests for the image data pipeline."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from promptpert.core.data import (
    DatasetSpec,
    ImageBatch,
    augment,
    clamp_valid,
    load_image_batch,
    open_dataset,
    read_image,
    synth_toy_dataset,
    write_image,
)
from promptpert.utils.exceptions import ArgumentError, DataLoadError, ShapeError


@pytest.mark.unit
class TestImageBatch:
    """Validation of the batch container."""

    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ArgumentError):
            ImageBatch(torch.full((1, 3, 8, 8), 1.5), ("a",))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            ImageBatch(torch.zeros(3, 8, 8), ("a",))

    def test_rejects_small_images(self):
        with pytest.raises(ShapeError):
            ImageBatch(torch.zeros(1, 3, 4, 4), ("a",))

    def test_id_count_must_match(self):
        with pytest.raises(ArgumentError):
            ImageBatch(torch.zeros(2, 3, 8, 8), ("a",))

    def test_select_keeps_provenance(self, tiny_batch):
        picked = tiny_batch.select([2, 0])
        assert picked.ids == (tiny_batch.ids[2], tiny_batch.ids[0])
        assert torch.equal(picked.pixels[1], tiny_batch.pixels[0])
        assert picked.domain_tag == tiny_batch.domain_tag


@pytest.mark.unit
class TestLoadImageBatch:
    """Loading from the synthetic source and from folders."""

    def setup_method(self):
        self.spec = DatasetSpec(num_classes=8, samples_per_class=2, image_size=32, seed=3)

    def test_single_image_shape_and_range(self):
        batch = load_image_batch(self.spec, [0], 32)
        assert batch.pixels.shape == (1, 3, 32, 32)
        assert batch.pixels.min() >= 0 and batch.pixels.max() <= 1

    def test_deterministic(self):
        a = load_image_batch(self.spec, [0, 3, 7])
        b = load_image_batch(self.spec, [0, 3, 7])
        assert torch.equal(a.pixels, b.pixels)
        assert a.ids == b.ids

    def test_empty_indices_rejected(self):
        with pytest.raises(ArgumentError):
            load_image_batch(self.spec, [])

    def test_invalid_index_rejected(self):
        with pytest.raises(ArgumentError):
            load_image_batch(self.spec, [10_000])

    def test_tiny_size_rejected(self):
        with pytest.raises(ArgumentError):
            load_image_batch(self.spec, [0], 4)

    def test_directory_matches_reference_decoder(self, tmp_path):
        rng = np.random.default_rng(0)
        for cls in ("cat", "dog"):
            (tmp_path / cls).mkdir()
            for i in range(2):
                array = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
                Image.fromarray(array).save(tmp_path / cls / f"{i}.png")

        spec = DatasetSpec(kind="directory", root=tmp_path, image_size=16)
        dataset = open_dataset(spec)
        batch = load_image_batch(spec, [0, 1, 2, 3], dataset=dataset)

        assert dataset.class_names == ["cat", "dog"]
        assert dataset.labels == [0, 0, 1, 1]
        for i, image_id in enumerate(batch.ids):
            reference = np.asarray(Image.open(tmp_path / image_id), dtype=np.float64) / 255.0
            ours = batch.pixels[i].permute(1, 2, 0).double().numpy()
            assert abs(ours.mean() - reference.mean()) <= 1 / 255

    def test_missing_directory_raises(self, tmp_path):
        spec = DatasetSpec(kind="directory", root=tmp_path / "nope")
        with pytest.raises(DataLoadError):
            open_dataset(spec)

    def test_corrupt_file_raises(self, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not a png at all")
        with pytest.raises(DataLoadError) as excinfo:
            read_image(bad)
        assert "broken.png" in str(excinfo.value)

    def test_write_then_read_is_exact_in_8_bit(self, tmp_path):
        pixels = torch.randint(0, 256, (3, 8, 8)).float() / 255
        write_image(pixels, tmp_path / "x.png")
        assert torch.equal(read_image(tmp_path / "x.png"), pixels)


@pytest.mark.unit
class TestAugment:
    """Flip + random resized crop."""

    def test_fixed_seed_is_deterministic(self, tiny_batch):
        a = augment(tiny_batch, seed=11)
        b = augment(tiny_batch, seed=11)
        assert torch.equal(a.pixels, b.pixels)

    def test_identity_configuration(self, tiny_batch):
        out = augment(tiny_batch, seed=5, flip_prob=0.0, scale=(1.0, 1.0))
        assert torch.equal(out.pixels, tiny_batch.pixels)

    def test_flip_frequency(self):
        # Asymmetric image: a flip is detectable by comparing halves.
        pixels = torch.zeros(1, 1, 8, 8)
        pixels[..., :4] = 1.0
        batch = ImageBatch(pixels, ("p",))
        flips = 0
        for seed in range(1000):
            out = augment(batch, seed=seed, flip_prob=0.5, scale=(1.0, 1.0))
            flips += int(out.pixels[0, 0, 0, 0] == 0.0)
        assert abs(flips / 1000 - 0.5) <= 0.05

    def test_certain_flip_mirrors_columns(self, tiny_batch):
        out = augment(tiny_batch, seed=2, flip_prob=1.0, scale=(1.0, 1.0))
        assert torch.equal(out.pixels, tiny_batch.pixels.flip(-1))

    def test_crop_keeps_shape_and_range(self, tiny_batch):
        out = augment(tiny_batch, seed=9, flip_prob=0.0, scale=(0.5, 0.6))
        assert out.pixels.shape == tiny_batch.pixels.shape
        assert out.ids == tiny_batch.ids
        assert 0.0 <= float(out.pixels.min()) and float(out.pixels.max()) <= 1.0
        assert not torch.equal(out.pixels, tiny_batch.pixels)

    def test_bad_scale_rejected(self, tiny_batch):
        with pytest.raises(ArgumentError):
            augment(tiny_batch, seed=0, scale=(0.9, 0.5))


@pytest.mark.unit
class TestSyntheticShapes:
    """The seeded toy dataset."""

    def test_balanced(self):
        dataset = synth_toy_dataset(DatasetSpec(num_classes=8, samples_per_class=100, image_size=16))
        assert len(dataset) == 800
        counts = np.bincount(dataset.labels)
        assert counts.tolist() == [100] * 8

    def test_checksum_is_seed_determined(self):
        spec = DatasetSpec(num_classes=3, samples_per_class=2, image_size=16, seed=4)
        assert synth_toy_dataset(spec).checksum() == synth_toy_dataset(spec).checksum()
        other = spec.model_copy(update={"seed": 5})
        assert synth_toy_dataset(spec).checksum() != synth_toy_dataset(other).checksum()

    def test_splits_differ(self):
        spec = DatasetSpec(num_classes=2, samples_per_class=2, image_size=16)
        train = synth_toy_dataset(spec)
        held_out = synth_toy_dataset(spec.model_copy(update={"split": "eval"}))
        assert not torch.equal(train.load(0), held_out.load(0))

    def test_class_names_unique(self):
        dataset = synth_toy_dataset(DatasetSpec(num_classes=25, samples_per_class=1, image_size=16))
        assert len(set(dataset.class_names)) == 25

    def test_too_many_classes_rejected(self):
        with pytest.raises(ArgumentError):
            synth_toy_dataset(DatasetSpec(num_classes=26, samples_per_class=1))

    def test_directory_kind_rejected(self, tmp_path):
        with pytest.raises(ArgumentError):
            synth_toy_dataset(DatasetSpec(kind="directory", root=tmp_path))


@pytest.mark.unit
class TestClampValid:
    """Clamping into [0, 1]."""

    def test_interior_and_boundaries(self):
        x = torch.tensor([0.5, 1.2, -0.1])
        assert clamp_valid(x).tolist() == pytest.approx([0.5, 1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=64))
    def test_range_property(self, values):
        out = clamp_valid(torch.tensor(values))
        assert out.min() >= 0 and out.max() <= 1
