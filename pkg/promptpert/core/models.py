"""Classifiers the generator is trained against and evaluated on.

A :class:`Classifier` is any ``nn.Module`` over ``[0, 1]`` pixels paired with
a name and its label names. Surrogates are used white-box (gradients flow to
the generator through them); victims are wrapped in :class:`BlackBoxVictim`,
which only ever exposes no-grad logits. :class:`SmallCNN` and
:func:`fit_classifier` provide desk-scale surrogates and victims.
"""

import io
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..utils.config import write_atomic
from ..utils.exceptions import ArgumentError, DataLoadError
from ..utils.logging import get_logger
from .data import ImageDataset, make_loader

logger = get_logger()


class Classifier(nn.Module):
    """A named classifier producing ``B x L`` logits."""

    def __init__(self, network: nn.Module, label_names: Sequence[str], name: str = "classifier"):
        super().__init__()
        if len(label_names) < 2:
            raise ArgumentError("a classifier needs at least two labels")
        self.network = network
        self.label_names = list(label_names)
        self.name = name

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.network(pixels)

    def freeze(self) -> "Classifier":
        """Eval mode and no parameter gradients; returns ``self``."""
        self.eval()
        for param in self.parameters():
            param.requires_grad_(False)
        return self


class BlackBoxVictim:
    """Forward-only view of a classifier: logits come back detached."""

    def __init__(self, classifier: Classifier):
        self._classifier = classifier.eval()
        self.name = classifier.name
        self.label_names = list(classifier.label_names)

    def __call__(self, pixels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            dtype = next(self._classifier.parameters()).dtype
            return self._classifier(pixels.detach().to(dtype)).detach()


class SmallCNN(nn.Module):
    """Three conv stages and a linear head; inputs centered around 0.5."""

    def __init__(self, num_classes: int, in_channels: int = 3, width: int = 16):
        super().__init__()
        self.width = width
        self.in_channels = in_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width * 2, width * 4, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(width * 4, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x - 0.5).flatten(1))


class ClassifierSpec(BaseModel):
    """How to obtain a surrogate or victim: train a toy CNN, or load a file."""

    model_config = ConfigDict(extra="forbid")

    name: str
    kind: Literal["toy", "file"] = "toy"
    path: Path | None = None
    seed: int = 0
    width: int = Field(default=16, ge=1)
    epochs: int = Field(default=5, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def _check_path(self) -> "ClassifierSpec":
        if self.kind == "file" and self.path is None:
            raise ValueError(f"classifier '{self.name}' of kind 'file' needs 'path'")
        return self


@torch.no_grad()
def classifier_accuracy(classifier: nn.Module, dataset: ImageDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy on the whole dataset."""
    classifier.eval()
    correct = 0
    for pixels, labels, _ in make_loader(dataset, batch_size, seed=0, shuffle=False):
        correct += int((classifier(pixels).argmax(1) == labels).sum())
    return correct / len(dataset)


def fit_classifier(
    dataset: ImageDataset,
    name: str = "toy-cnn",
    seed: int = 0,
    width: int = 16,
    epochs: int = 5,
    learning_rate: float = 1e-3,
    batch_size: int = 64,
) -> Classifier:
    """Train a :class:`SmallCNN` on ``dataset`` and return it frozen."""
    started = time.perf_counter()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        sample = dataset.load(0)
        network = SmallCNN(len(dataset.class_names), sample.shape[0], width)
        optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate)
        network.train()
        for epoch in range(epochs):
            total = 0.0
            for pixels, labels, _ in make_loader(dataset, batch_size, seed=seed + epoch):
                loss = F.cross_entropy(network(pixels), labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss) * len(labels)
            logger.debug(f"classifier {name} epoch {epoch + 1}", loss=f"{total / len(dataset):.4f}")

    classifier = Classifier(network, dataset.class_names, name).freeze()
    logger.log_performance(f"fitting classifier {name}", time.perf_counter() - started)
    return classifier


def save_classifier(classifier: Classifier, path: str | Path) -> Path:
    """Persist a :class:`SmallCNN`-backed classifier."""
    network = classifier.network
    if not isinstance(network, SmallCNN):
        raise ArgumentError("only SmallCNN classifiers can be saved")
    buffer = io.BytesIO()
    torch.save(
        {
            "name": classifier.name,
            "label_names": classifier.label_names,
            "width": network.width,
            "in_channels": network.in_channels,
            "state_dict": network.state_dict(),
        },
        buffer,
    )
    return write_atomic(path, buffer.getvalue())


def load_classifier(path: str | Path, name: str | None = None) -> Classifier:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        network = SmallCNN(len(payload["label_names"]), payload["in_channels"], payload["width"])
        network.load_state_dict(payload["state_dict"])
    except (OSError, RuntimeError, KeyError, EOFError) as exc:
        raise DataLoadError(path, f"not a classifier file ({exc})") from exc
    return Classifier(network, payload["label_names"], name or payload["name"]).freeze()


def build_classifier(
    spec: ClassifierSpec, dataset: ImageDataset, cache_dir: str | Path | None = None
) -> Classifier:
    """Load ``spec``'s classifier, training (and caching) toy CNNs on demand."""
    if spec.kind == "file":
        return load_classifier(spec.path, spec.name)

    cached = None
    if cache_dir is not None:
        stem = f"{spec.name}-s{spec.seed}-w{spec.width}-e{spec.epochs}"
        cached = Path(cache_dir) / "classifiers" / f"{stem}.pt"
    if cached is not None and cached.exists():
        logger.info(f"reusing cached classifier {spec.name}", path=str(cached))
        return load_classifier(cached, spec.name)

    classifier = fit_classifier(
        dataset,
        name=spec.name,
        seed=spec.seed,
        width=spec.width,
        epochs=spec.epochs,
        learning_rate=spec.learning_rate,
        batch_size=spec.batch_size,
    )
    if cached is not None:
        save_classifier(classifier, cached)
    return classifier
