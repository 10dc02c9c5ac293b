"""Tests for the preprocessing defenses."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from promptpert.core.data import DatasetSpec, ImageBatch, load_image_batch
from promptpert.core.defenses import (
    DefenseSpec,
    apply_defense,
    average_smooth,
    gaussian_kernel,
    gaussian_smooth,
    jpeg_roundtrip,
    median_smooth,
)
from promptpert.utils.exceptions import ArgumentError


def _psnr(a, b):
    mse = float(((a - b) ** 2).mean())
    return 10 * np.log10(1.0 / max(mse, 1e-12))


def _natural_image():
    """Smooth gradients plus a shape: compressible like a photograph."""
    spec = DatasetSpec(num_classes=4, samples_per_class=1, image_size=64, seed=1)
    return load_image_batch(spec, [0, 1, 2, 3])


@pytest.mark.unit
class TestSmoothing:
    def setup_method(self):
        self.constant = ImageBatch(torch.full((2, 3, 12, 12), 0.37), ("a", "b"))

    @pytest.mark.parametrize("smooth", [gaussian_smooth, median_smooth, average_smooth])
    def test_constant_image_unchanged(self, smooth):
        out = smooth(self.constant, 3)
        assert torch.allclose(out.pixels, self.constant.pixels, atol=1e-6)

    def test_gaussian_kernel_sums_to_one(self):
        for k in (3, 5, 7):
            for sigma in (0.5, 1.0, 2.0):
                assert abs(float(gaussian_kernel(k, sigma).sum()) - 1.0) <= 1e-6

    def test_average_impulse(self):
        pixels = torch.zeros(1, 1, 9, 9)
        pixels[0, 0, 4, 4] = 1.0
        out = average_smooth(ImageBatch(pixels, ("i",)), 3).pixels[0, 0]
        assert torch.allclose(out[3:6, 3:6], torch.full((3, 3), 1 / 9))
        assert out.sum() == pytest.approx(1.0, abs=1e-6)
        assert out[:3].abs().max() == 0

    def test_median_removes_impulse(self):
        pixels = torch.zeros(1, 1, 9, 9)
        pixels[0, 0, 4, 4] = 1.0
        out = median_smooth(ImageBatch(pixels, ("i",)), 3).pixels
        assert out.abs().max() == 0

    @pytest.mark.parametrize("smooth", [median_smooth, average_smooth])
    def test_even_kernel_rejected(self, smooth):
        with pytest.raises(ArgumentError):
            smooth(self.constant, 4)

    def test_even_kernel_rejected_in_spec(self):
        with pytest.raises(ValidationError):
            DefenseSpec(kind="median", kernel_size=2)

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        kind=st.sampled_from(["gaussian", "median", "average", "jpeg", "none"]),
        k=st.sampled_from([3, 5]),
    )
    def test_defenses_preserve_range_and_shape(self, seed, kind, k):
        gen = torch.Generator().manual_seed(seed)
        x = ImageBatch(torch.rand(2, 3, 16, 16, generator=gen), ("a", "b"))
        out = apply_defense(x, DefenseSpec(kind=kind, kernel_size=k, quality=60))
        assert out.pixels.shape == x.pixels.shape
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1
        assert out.ids == x.ids


@pytest.mark.unit
class TestJpeg:
    def setup_method(self):
        self.batch = _natural_image()

    def test_shape_and_range(self):
        out = jpeg_roundtrip(self.batch, 75)
        assert out.pixels.shape == self.batch.pixels.shape
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1

    def test_deterministic(self):
        assert torch.equal(jpeg_roundtrip(self.batch, 70).pixels, jpeg_roundtrip(self.batch, 70).pixels)

    def test_higher_quality_is_closer(self):
        q90 = _psnr(self.batch.pixels, jpeg_roundtrip(self.batch, 90).pixels)
        q70 = _psnr(self.batch.pixels, jpeg_roundtrip(self.batch, 70).pixels)
        assert q90 >= q70

    def test_grayscale(self):
        gray = ImageBatch(self.batch.pixels.mean(1, keepdim=True), self.batch.ids)
        assert jpeg_roundtrip(gray, 80).pixels.shape == gray.pixels.shape

    @pytest.mark.parametrize("quality", [0, 101])
    def test_quality_range(self, quality):
        with pytest.raises(ArgumentError):
            jpeg_roundtrip(self.batch, quality)


@pytest.mark.unit
class TestDefenseSpec:
    def test_labels(self):
        assert DefenseSpec().label == "none"
        assert DefenseSpec(kind="jpeg", quality=70).label == "jpeg(Q=70)"
        assert DefenseSpec(kind="median", kernel_size=5).label == "median(k=5)"

    def test_none_is_identity(self):
        x = _natural_image()
        assert apply_defense(x, DefenseSpec()) is x

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            DefenseSpec(kind="blur")
