"""Image data pipeline.

Loads class-per-subdirectory image folders, synthesizes the colored-shapes toy
dataset, augments training batches, and converts between 8-bit files and the
internal ``[0, 1]`` float pixel domain. 8-bit conversion happens only here, at
file I/O, so budgets such as 16/255 stay exact in float.
"""

import hashlib
import itertools
from collections.abc import Sequence
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms.v2 import functional as TF

from ..utils.exceptions import ArgumentError, DataLoadError, ShapeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

SHAPES = ("circle", "square", "triangle", "diamond", "cross")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 40),
    "magenta": (200, 50, 200),
}
MAX_SHAPE_CLASSES = len(SHAPES) * len(COLORS)


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images in ``[0, 1]``.

    Attributes:
        pixels: Float tensor of shape ``B x N x H x W``.
        ids: One identifier per image.
        domain_tag: Label of the source dataset (e.g. ``"shapes"``).
    """

    pixels: torch.Tensor
    ids: tuple[str, ...]
    domain_tag: str = "unknown"

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ShapeError(f"pixels must be B x N x H x W, got {tuple(self.pixels.shape)}")
        b, n, h, w = self.pixels.shape
        if b < 1 or n not in (1, 3) or h < 8 or w < 8:
            raise ShapeError(f"invalid image batch shape {tuple(self.pixels.shape)}")
        if len(self.ids) != b:
            raise ArgumentError(f"expected {b} ids, got {len(self.ids)}")
        values = self.pixels.detach()
        if not torch.isfinite(values).all() or values.min() < 0 or values.max() > 1:
            raise ArgumentError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.pixels.shape[-2], self.pixels.shape[-1]

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        """Return a copy carrying new pixels and the same provenance."""
        return replace(self, pixels=pixels)

    def select(self, indices: Sequence[int]) -> "ImageBatch":
        idx = list(indices)
        return ImageBatch(self.pixels[idx], tuple(self.ids[i] for i in idx), self.domain_tag)


class DatasetSpec(BaseModel):
    """Where images come from: a local folder or the seeded shapes generator."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["directory", "synthetic-shapes"] = "synthetic-shapes"
    root: Path | None = None
    num_classes: int = Field(default=8, ge=2)
    samples_per_class: int = Field(default=100, ge=1)
    image_size: int = Field(default=32, ge=8)
    seed: int = 0
    split: Literal["train", "eval"] = "train"

    @model_validator(mode="after")
    def _check_root(self) -> "DatasetSpec":
        if self.kind == "directory" and self.root is None:
            raise ValueError("directory datasets need 'root'")
        return self


class ImageDataset(Dataset):
    """Labeled image dataset yielding ``(pixels, label, index)`` triples."""

    domain_tag: str = "unknown"

    @property
    def class_names(self) -> list[str]:
        raise NotImplementedError

    @property
    def labels(self) -> list[int]:
        raise NotImplementedError

    def image_id(self, index: int) -> str:
        return f"{self.domain_tag}-{index:06d}"

    def load(self, index: int) -> torch.Tensor:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int, int]:
        return self.load(index), self.labels[index], index


def shape_class_table() -> list[tuple[str, str]]:
    """All (shape, color) pairs, diagonal-ordered so the first classes differ in both."""
    pairs = itertools.product(range(len(SHAPES)), range(len(COLORS)))
    ordered = sorted(pairs, key=lambda sc: ((sc[1] - sc[0]) % len(COLORS), sc[0]))
    color_names = list(COLORS)
    return [(SHAPES[s], color_names[c]) for s, c in ordered]


class ShapesDataset(ImageDataset):
    """Colored geometric shapes on noisy backgrounds, one class per shape x color.

    Every image is a pure function of ``(seed, split, index)``, so the dataset
    is reproducible and safe to load from parallel workers in any order.
    """

    domain_tag = "shapes"

    def __init__(self, spec: DatasetSpec):
        if spec.num_classes > MAX_SHAPE_CLASSES:
            raise ArgumentError(
                f"num_classes={spec.num_classes} exceeds the {MAX_SHAPE_CLASSES} "
                "available shape x color combinations"
            )
        self.spec = spec
        self._table = shape_class_table()[: spec.num_classes]
        self._split_code = 0 if spec.split == "train" else 1

    @cached_property
    def class_names(self) -> list[str]:
        return [f"{color} {shape}" for shape, color in self._table]

    @cached_property
    def labels(self) -> list[int]:
        return [i // self.spec.samples_per_class for i in range(len(self))]

    def __len__(self) -> int:
        return self.spec.num_classes * self.spec.samples_per_class

    def load(self, index: int) -> torch.Tensor:
        if not 0 <= index < len(self):
            raise ArgumentError(f"index {index} out of range for {len(self)} images")
        return render_shape(
            *self._table[index // self.spec.samples_per_class],
            size=self.spec.image_size,
            rng=np.random.default_rng([self.spec.seed, self._split_code, index]),
        )

    def checksum(self) -> str:
        """SHA-256 over every rendered image and label."""
        digest = hashlib.sha256()
        for i in range(len(self)):
            digest.update(self.load(i).numpy().tobytes())
            digest.update(self.labels[i].to_bytes(4, "little"))
        return digest.hexdigest()


def render_shape(shape: str, color: str, size: int, rng: np.random.Generator) -> torch.Tensor:
    """Draw one shape image as a ``3 x size x size`` float tensor."""
    level = rng.uniform(0.1, 0.4) * 255
    background = np.clip(level + rng.normal(0, 8, (size, size, 3)), 0, 255)
    image = Image.fromarray(background.astype(np.uint8))
    draw = ImageDraw.Draw(image)

    cx, cy = size / 2 + rng.uniform(-size / 6, size / 6, 2)
    r = size * rng.uniform(0.25, 0.38)
    fill = tuple(int(np.clip(c + rng.integers(-20, 21), 0, 255)) for c in COLORS[color])

    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "square":
        s = r * 0.85
        draw.rectangle([cx - s, cy - s, cx + s, cy + s], fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r * 0.8), (cx + r, cy + r * 0.8)], fill=fill)
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=fill)
    elif shape == "cross":
        t = r * 0.35
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=fill)
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=fill)
    else:
        raise ArgumentError(f"unknown shape '{shape}'")

    return TF.pil_to_tensor(image).float() / 255.0


class DirectoryDataset(ImageDataset):
    """Images under ``root/<class name>/*.png|jpg``; classes sorted by name."""

    def __init__(self, spec: DatasetSpec):
        root = Path(spec.root) if spec.root is not None else None
        if root is None or not root.is_dir():
            raise DataLoadError(spec.root, "dataset root is not a directory")
        self.spec = spec
        self.domain_tag = root.name
        self._classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        self._files: list[Path] = []
        self._labels: list[int] = []
        for label, name in enumerate(self._classes):
            for path in sorted((root / name).iterdir()):
                if path.suffix.lower() in IMAGE_SUFFIXES:
                    self._files.append(path)
                    self._labels.append(label)
        if not self._files:
            raise DataLoadError(root, "no PNG/JPEG images found")

    @property
    def class_names(self) -> list[str]:
        return list(self._classes)

    @property
    def labels(self) -> list[int]:
        return self._labels

    def image_id(self, index: int) -> str:
        return str(self._files[index].relative_to(self.spec.root))

    def load(self, index: int) -> torch.Tensor:
        if not 0 <= index < len(self):
            raise ArgumentError(f"index {index} out of range for {len(self)} images")
        pixels = read_image(self._files[index])
        return resize(pixels.unsqueeze(0), (self.spec.image_size,) * 2)[0]


def open_dataset(spec: DatasetSpec) -> ImageDataset:
    """Build the dataset handle described by ``spec``."""
    if spec.kind == "synthetic-shapes":
        return ShapesDataset(spec)
    return DirectoryDataset(spec)


def synth_toy_dataset(spec: DatasetSpec) -> ShapesDataset:
    """Create the balanced, seed-determined shapes dataset."""
    if spec.kind != "synthetic-shapes":
        raise ArgumentError(f"synth_toy_dataset needs kind 'synthetic-shapes', got '{spec.kind}'")
    return ShapesDataset(spec)


def read_image(path: str | Path) -> torch.Tensor:
    """Decode an image file to a ``3 x H x W`` float tensor in ``[0, 1]``."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise DataLoadError(path, str(exc)) from exc
    return TF.pil_to_tensor(rgb).float() / 255.0


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """``N x H x W`` floats in ``[0, 1]`` to an ``H x W (x 3)`` uint8 array."""
    array = (pixels.detach().cpu().clamp(0, 1) * 255).round().to(torch.uint8)
    array = array.permute(1, 2, 0).numpy()
    return array[..., 0] if array.shape[-1] == 1 else array


def write_image(pixels: torch.Tensor, path: str | Path) -> Path:
    """Write one ``N x H x W`` float image as an 8-bit PNG."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(target, format="PNG")
    return target


def resize(pixels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(pixels.shape[-2:]) == tuple(size):
        return pixels
    out = F.interpolate(pixels, size=size, mode="bilinear", align_corners=False, antialias=True)
    return clamp_valid(out)


def load_image_batch(
    spec: DatasetSpec,
    indices: Sequence[int],
    size: tuple[int, int] | int | None = None,
    dataset: ImageDataset | None = None,
) -> ImageBatch:
    """Load ``indices`` from the dataset as one batch resized to ``size``.

    Args:
        spec: Dataset description.
        indices: Positions to load, in order.
        size: Target ``(H, W)``; defaults to ``spec.image_size``.
        dataset: Already-opened handle for ``spec`` (avoids rescanning folders).

    Raises:
        ArgumentError: Empty index list, invalid index or size below 8 x 8.
        DataLoadError: Missing or corrupt image file.
    """
    if len(indices) == 0:
        raise ArgumentError("index list is empty")
    if size is None:
        size = spec.image_size
    hw = (size, size) if isinstance(size, int) else tuple(size)
    if min(hw) < 8:
        raise ArgumentError(f"target size must be at least 8 x 8, got {hw}")

    handle = dataset or open_dataset(spec)
    images = [handle.load(int(i)) for i in indices]
    pixels = resize(torch.stack(images), hw)
    return ImageBatch(
        pixels=pixels,
        ids=tuple(handle.image_id(int(i)) for i in indices),
        domain_tag=handle.domain_tag,
    )


def augment(
    batch: ImageBatch,
    seed: int,
    flip_prob: float = 0.5,
    scale: tuple[float, float] = (0.8, 1.0),
) -> ImageBatch:
    """Random horizontal flip, then a random resized crop back to full size.

    Args:
        batch: Images to augment.
        seed: Seed for all random draws; fixed seed means identical output.
        flip_prob: Per-image flip probability.
        scale: Interval the crop's area fraction is drawn from.
    """
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ArgumentError(f"scale interval must satisfy 0 < lo <= hi <= 1, got {scale}")
    if not 0 <= flip_prob <= 1:
        raise ArgumentError(f"flip_prob must be in [0, 1], got {flip_prob}")

    gen = torch.Generator().manual_seed(seed)
    _, _, h, w = batch.pixels.shape
    out = []
    for image in batch.pixels:
        if torch.rand((), generator=gen).item() < flip_prob:
            image = TF.hflip(image)
        area = lo + (hi - lo) * torch.rand((), generator=gen).item()
        ch = max(1, min(h, round(h * area**0.5)))
        cw = max(1, min(w, round(w * area**0.5)))
        top = int(torch.randint(0, h - ch + 1, (), generator=gen))
        left = int(torch.randint(0, w - cw + 1, (), generator=gen))
        if (ch, cw) != (h, w):
            image = TF.resized_crop(image, top, left, ch, cw, [h, w], antialias=True)
        out.append(image)
    return batch.with_pixels(clamp_valid(torch.stack(out)))


def clamp_valid(x: torch.Tensor) -> torch.Tensor:
    """Clamp every element into ``[0, 1]``."""
    return x.clamp(0.0, 1.0)


def make_loader(
    dataset: ImageDataset,
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    num_workers: int = 0,
) -> DataLoader:
    """Seeded DataLoader over ``(pixels, label, index)`` triples."""
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        generator=torch.Generator().manual_seed(seed),
        drop_last=False,
    )
