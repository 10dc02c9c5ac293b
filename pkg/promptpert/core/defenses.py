"""Input-preprocessing defenses applied to adversarial images before a victim.

Smoothing filters run per channel with reflect padding; JPEG is a real codec
round-trip through Pillow. Every defense maps ``[0, 1]`` images to ``[0, 1]``
images of the same shape.
"""

import io
from typing import Literal

import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torchvision.transforms.functional import pil_to_tensor, to_pil_image

from ..utils.exceptions import ArgumentError, DefenseError
from .data import ImageBatch, clamp_valid


class DefenseSpec(BaseModel):
    """One preprocessing defense and its parameters."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["none", "gaussian", "median", "average", "jpeg"] = "none"
    kernel_size: int = 3
    sigma: float = Field(default=1.0, gt=0)
    quality: int = Field(default=75, ge=1, le=100)

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value < 3 or value % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {value}")
        return value

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "jpeg":
            return f"jpeg(Q={self.quality})"
        if self.kind == "gaussian":
            return f"gaussian(k={self.kernel_size},sigma={self.sigma:g})"
        return f"{self.kind}(k={self.kernel_size})"

    @property
    def params(self) -> dict[str, float | int]:
        if self.kind == "jpeg":
            return {"quality": self.quality}
        if self.kind == "gaussian":
            return {"kernel_size": self.kernel_size, "sigma": self.sigma}
        if self.kind in ("median", "average"):
            return {"kernel_size": self.kernel_size}
        return {}


def _check_kernel(k: int) -> None:
    if k < 3 or k % 2 == 0:
        raise ArgumentError(f"kernel size must be odd and >= 3, got {k}")


def _pad(pixels: torch.Tensor, k: int) -> torch.Tensor:
    r = k // 2
    if min(pixels.shape[-2:]) <= r:
        raise ArgumentError(f"image {tuple(pixels.shape[-2:])} too small for kernel {k}")
    return F.pad(pixels, (r, r, r, r), mode="reflect")


def _depthwise(pixels: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    channels = pixels.shape[1]
    k = kernel.shape[-1]
    weight = kernel.to(pixels.dtype).expand(channels, 1, k, k).contiguous()
    return clamp_valid(F.conv2d(_pad(pixels, k), weight, groups=channels))


def gaussian_kernel(k: int, sigma: float, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Normalized ``k x k`` Gaussian weights."""
    _check_kernel(k)
    if sigma <= 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    coords = torch.arange(k, dtype=torch.float64) - k // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = torch.outer(g, g)
    return (kernel / kernel.sum()).to(dtype)


def gaussian_smooth(x: ImageBatch, k: int = 3, sigma: float = 1.0) -> ImageBatch:
    return x.with_pixels(_depthwise(x.pixels, gaussian_kernel(k, sigma)))


def average_smooth(x: ImageBatch, k: int = 3) -> ImageBatch:
    _check_kernel(k)
    return x.with_pixels(_depthwise(x.pixels, torch.full((k, k), 1.0 / (k * k))))


def median_smooth(x: ImageBatch, k: int = 3) -> ImageBatch:
    """Per-channel median over each ``k x k`` window."""
    _check_kernel(k)
    pixels = x.pixels
    b, c, h, w = pixels.shape
    windows = F.unfold(_pad(pixels, k), kernel_size=k)
    windows = windows.view(b, c, k * k, h * w)
    return x.with_pixels(clamp_valid(windows.median(dim=2).values.view(b, c, h, w)))


def jpeg_roundtrip(x: ImageBatch, quality: int) -> ImageBatch:
    """Encode every image as baseline JPEG at ``quality`` and decode it back.

    Raises:
        ArgumentError: ``quality`` outside ``[1, 100]``.
        DefenseError: The codec failed.
    """
    if not 1 <= quality <= 100:
        raise ArgumentError(f"JPEG quality must be in [1, 100], got {quality}")
    dtype = x.pixels.dtype
    out = []
    for image in x.pixels.detach().cpu():
        buffer = io.BytesIO()
        try:
            to_pil_image((image.float().clamp(0, 1) * 255).round().to(torch.uint8)).save(
                buffer, format="JPEG", quality=quality
            )
            buffer.seek(0)
            with Image.open(buffer) as decoded:
                decoded.load()
                mode = "L" if image.shape[0] == 1 else "RGB"
                out.append(pil_to_tensor(decoded.convert(mode)))
        except (OSError, ValueError) as exc:
            raise DefenseError(f"JPEG round-trip at Q={quality} failed: {exc}") from exc
    pixels = torch.stack(out).to(dtype) / 255.0
    return x.with_pixels(pixels.to(x.pixels.device))


def apply_defense(x: ImageBatch, spec: DefenseSpec) -> ImageBatch:
    if spec.kind == "none":
        return x
    if spec.kind == "gaussian":
        return gaussian_smooth(x, spec.kernel_size, spec.sigma)
    if spec.kind == "median":
        return median_smooth(x, spec.kernel_size)
    if spec.kind == "average":
        return average_smooth(x, spec.kernel_size)
    return jpeg_roundtrip(x, spec.quality)
