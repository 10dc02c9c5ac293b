"""Pytest configuration and shared fixtures.

Everything here is desk-sized: 16x16 shapes images, narrow generators and a
one-epoch toy CNN, so unit tests stay fast on a CPU.
"""

import pytest
import torch

from promptpert.core.conditioning import HashTextEncoder
from promptpert.core.data import DatasetSpec, ImageBatch, ShapesDataset, load_image_batch
from promptpert.core.generator import GeneratorConfig, build_generator
from promptpert.core.models import fit_classifier


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(num_classes=4, samples_per_class=4, image_size=16, seed=0)


@pytest.fixture
def tiny_dataset(tiny_spec) -> ShapesDataset:
    return ShapesDataset(tiny_spec)


@pytest.fixture
def tiny_batch(tiny_spec, tiny_dataset) -> ImageBatch:
    return load_image_batch(tiny_spec, [0, 5, 10, 15], dataset=tiny_dataset)


@pytest.fixture
def small_config() -> GeneratorConfig:
    return GeneratorConfig(base_width=8, n_residual_blocks=1, attention_width=8)


@pytest.fixture
def small_generator(small_config):
    return build_generator(small_config, seed=0).eval()


@pytest.fixture
def stub_encoder() -> HashTextEncoder:
    return HashTextEncoder(seed=0)


@pytest.fixture
def tiny_classifier(tiny_dataset):
    return fit_classifier(tiny_dataset, name="tiny", seed=0, width=4, epochs=1, batch_size=8)
