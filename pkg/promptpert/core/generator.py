"""Text-conditioned perturbation generator.

Forward path: conv stem -> two stride-2 stages, each preceded by channel-wise
fusion of the purified text embedding -> fusion -> residual blocks -> decoder
with cross-attention to the raw text embedding before each upsample -> conv
head -> ``epsilon * tanh`` projection. Also holds the patch-mask used during
fine-tuning and the adversarial-example assembly.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..utils.exceptions import ArgumentError, ConfigError, ShapeError
from .conditioning import (
    DEFAULT_PURIFIER_WIDTHS,
    TEXT_DIM,
    TextCondition,
    VLPurifier,
    purify,
    stack_embeddings,
)
from .data import ImageBatch, clamp_valid

DEFAULT_EPSILON = 16 / 255
DOWNSAMPLE_FACTOR = 4
MAX_CROSS_ATTENTION = 3


class GeneratorConfig(BaseModel):
    """Architecture hyperparameters of the generator."""

    model_config = ConfigDict(extra="forbid")

    in_channels: Literal[1, 3] = 3
    base_width: int = Field(default=64, ge=1)
    n_residual_blocks: int = Field(default=6, ge=0)
    purifier_widths: tuple[int, ...] = DEFAULT_PURIFIER_WIDTHS
    leaky_slope: float = 0.2
    cross_attention_count: int = Field(default=2, ge=0, le=MAX_CROSS_ATTENTION)
    attention_width: int = Field(default=64, ge=1)
    attention_tokens: int = Field(default=1, ge=1)
    use_purifier: bool = True
    use_fusion: bool = True
    condition_mode: Literal["text", "one_hot"] = "text"
    epsilon: float = Field(default=DEFAULT_EPSILON, gt=0, le=1)
    variant: str = "full"

    @field_validator("attention_tokens")
    @classmethod
    def _tokens_divide_text_dim(cls, value: int) -> int:
        if TEXT_DIM % value:
            raise ValueError(f"attention_tokens={value} must divide {TEXT_DIM}")
        return value

    @field_validator("purifier_widths")
    @classmethod
    def _purifier_endpoints(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if len(value) < 2 or value[0] != TEXT_DIM:
            raise ValueError(f"purifier widths must start at {TEXT_DIM}")
        return value

    @property
    def fusion_width(self) -> int:
        if not self.use_fusion:
            return 0
        return self.purifier_widths[-1] if self.use_purifier else TEXT_DIM


def conv_block(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(out_channels),
        nn.ReLU(),
    )


class ResidualBlock(nn.Module):
    """Two reflection-padded 3x3 convs with instance norm and a skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv_block(x)


class UpBlock(nn.Module):
    """Nearest-neighbor x2 upsample followed by a conv block."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = conv_block(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class CrossAttention(nn.Module):
    """Spatial positions attend to the text embedding split into T tokens.

    Queries are the ``h*w`` feature vectors; keys and values are the
    ``T`` tokens of width ``512 / T``. The attended update is projected back
    to the channel width and added to the input.
    """

    def __init__(self, channels: int, text_dim: int = TEXT_DIM, width: int = 64, tokens: int = 1):
        super().__init__()
        if tokens < 1 or text_dim % tokens:
            raise ConfigError(f"attention_tokens={tokens} must divide the text width {text_dim}")
        self.channels = channels
        self.text_dim = text_dim
        self.width = width
        self.tokens = tokens
        self.token_dim = text_dim // tokens
        self.to_q = nn.Linear(channels, width, bias=False)
        self.to_k = nn.Linear(self.token_dim, width, bias=False)
        self.to_v = nn.Linear(self.token_dim, width, bias=False)
        self.to_out = nn.Linear(width, channels, bias=False)

    def attention_weights(self, z: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        """Softmax weights of shape ``B x (h*w) x T``."""
        q, k, _ = self._qkv(z, e_t)
        return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.width), dim=-1)

    def _qkv(self, z: torch.Tensor, e_t: torch.Tensor) -> tuple[torch.Tensor, ...]:
        if z.dim() != 4 or z.shape[1] != self.channels:
            raise ShapeError(f"cross-attention expects {self.channels} channels, got {tuple(z.shape)}")
        if e_t.dim() != 2 or e_t.shape != (z.shape[0], self.text_dim):
            raise ShapeError(f"text embedding must be {z.shape[0]} x {self.text_dim}, got {tuple(e_t.shape)}")
        queries = z.flatten(2).transpose(1, 2)
        tokens = e_t.reshape(e_t.shape[0], self.tokens, self.token_dim)
        return self.to_q(queries), self.to_k(tokens), self.to_v(tokens)

    def forward(self, z: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        q, k, v = self._qkv(z, e_t)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.width), dim=-1)
        update = self.to_out(attn @ v)
        return z + update.transpose(1, 2).reshape(z.shape)


def cross_attention(z: torch.Tensor, e_t: torch.Tensor, p: CrossAttention) -> torch.Tensor:
    """Residual cross-attention of features ``z`` onto text embedding ``e_t``."""
    return p(z, e_t)


def fuse(h: torch.Tensor, e_star: torch.Tensor) -> torch.Tensor:
    """Broadcast ``B x k`` embeddings over space and append them as channels."""
    if h.shape[0] != e_star.shape[0]:
        raise ShapeError(f"batch mismatch: features {h.shape[0]} vs embedding {e_star.shape[0]}")
    b, _, height, width = h.shape
    planes = e_star[:, :, None, None].expand(b, e_star.shape[1], height, width)
    return torch.cat([h, planes.to(h.dtype)], dim=1)


def project(o: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Smooth l-inf projection ``epsilon * tanh(o)``."""
    if epsilon < 0:
        raise ArgumentError(f"epsilon must be non-negative, got {epsilon}")
    return epsilon * torch.tanh(o)


class PerturbationGenerator(nn.Module):
    """All learnable state of the generator plus its :class:`GeneratorConfig`."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        w, f = cfg.base_width, cfg.fusion_width

        self.purifier = (
            VLPurifier(cfg.purifier_widths, cfg.leaky_slope)
            if cfg.use_fusion and cfg.use_purifier
            else None
        )
        self.stem = conv_block(cfg.in_channels, w)
        self.down = nn.ModuleList(conv_block(w + f, w, stride=2) for _ in range(2))
        self.entry = conv_block(w + f, w)
        self.res_blocks = nn.Sequential(*(ResidualBlock(w) for _ in range(cfg.n_residual_blocks)))
        self.attention = nn.ModuleList(
            CrossAttention(w, TEXT_DIM, cfg.attention_width, cfg.attention_tokens)
            for _ in range(cfg.cross_attention_count)
        )
        self.up = nn.ModuleList(UpBlock(w, w) for _ in range(2))
        self.head = nn.Conv2d(w, cfg.in_channels, 3, padding=1, padding_mode="reflect")
        self._init_weights()

    def _init_weights(self) -> None:
        for name, module in self.named_modules():
            if name == "head":
                continue
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)
        for block in self.attention:
            for linear in (block.to_q, block.to_k, block.to_v, block.to_out):
                nn.init.orthogonal_(linear.weight)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def condition_features(self, e_t: torch.Tensor) -> torch.Tensor | None:
        """The per-sample vector fused into the encoder (``None`` without fusion)."""
        if not self.config.use_fusion:
            return None
        if self.purifier is None:
            return e_t
        return purify(e_t, self.purifier)

    def encode(self, x: torch.Tensor, e_star: torch.Tensor | None) -> torch.Tensor:
        _, _, height, width = x.shape
        if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR:
            raise ShapeError(
                f"image size {height}x{width} must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} image channels, got {x.shape[1]}")
        h = self.stem(x)
        for stage in self.down:
            h = stage(fuse(h, e_star) if e_star is not None else h)
        return h

    def decode(self, m: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        expected = self.config.base_width + self.config.fusion_width
        if m.dim() != 4 or m.shape[1] != expected:
            raise ShapeError(f"decoder expects {expected} input channels, got {tuple(m.shape)}")
        z = self.res_blocks(self.entry(m))
        blocks = list(self.attention)
        for i, up in enumerate(self.up):
            if i < len(blocks):
                z = blocks[i](z, e_t)
            z = up(z)
        if len(blocks) > len(self.up):
            z = blocks[len(self.up)](z, e_t)
        return self.head(z)

    def raw_output(self, x: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        e_star = self.condition_features(e_t)
        h = self.encode(x, e_star)
        m = fuse(h, e_star) if e_star is not None else h
        return self.decode(m, e_t)

    def forward(self, x: torch.Tensor, e_t: torch.Tensor, epsilon: float | None = None) -> torch.Tensor:
        """Perturbation tensor ``delta`` for pixels ``x`` and embeddings ``e_t``."""
        eps = self.config.epsilon if epsilon is None else epsilon
        return project(self.raw_output(x, e_t), eps)


def build_generator(config: GeneratorConfig | None = None, seed: int = 0) -> PerturbationGenerator:
    """Construct a generator with parameters drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PerturbationGenerator(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encode_image(
    x: ImageBatch, state: PerturbationGenerator, e_star: torch.Tensor | None = None
) -> torch.Tensor:
    """Encoder features at 1/4 resolution.

    When the state fuses embeddings and ``e_star`` is omitted, zero embeddings
    are fused in.
    """
    pixels = x.pixels.to(next(state.parameters()).dtype)
    if e_star is None and state.config.use_fusion:
        e_star = pixels.new_zeros(pixels.shape[0], state.config.fusion_width)
    return state.encode(pixels, e_star)


def decode(m: torch.Tensor, e_t: torch.Tensor, state: PerturbationGenerator) -> torch.Tensor:
    """Raw decoder output ``o`` at the original image resolution."""
    return state.decode(m, e_t)


@dataclass(frozen=True)
class PerturbationBatch:
    """Bounded perturbations with their budget, conditions and seed provenance."""

    delta: torch.Tensor
    epsilon: float
    conditions: tuple[TextCondition, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.delta.dim() != 4:
            raise ShapeError(f"delta must be B x N x H x W, got {tuple(self.delta.shape)}")
        if len(self.conditions) != self.delta.shape[0]:
            raise ArgumentError(
                f"need one condition per image: {len(self.conditions)} vs {self.delta.shape[0]}"
            )
        if self.delta.detach().abs().max() > self.epsilon + 1e-7:
            raise ArgumentError(f"perturbation exceeds the l-inf budget {self.epsilon}")

    def __len__(self) -> int:
        return self.delta.shape[0]

    @property
    def condition(self) -> TextCondition:
        """The shared condition; raises if the batch mixes target classes."""
        names = {c.class_name for c in self.conditions}
        if len(names) != 1:
            raise ArgumentError(f"batch mixes {len(names)} conditions")
        return self.conditions[0]

    def max_abs(self) -> float:
        return float(self.delta.detach().abs().max())


def _broadcast_conditions(
    cond: TextCondition | Sequence[TextCondition], batch_size: int
) -> tuple[TextCondition, ...]:
    if isinstance(cond, TextCondition):
        return (cond,) * batch_size
    conditions = tuple(cond)
    if len(conditions) != batch_size:
        raise ArgumentError(f"got {len(conditions)} conditions for {batch_size} images")
    return conditions


def generate(
    x: ImageBatch,
    cond: TextCondition | Sequence[TextCondition],
    epsilon: float | None,
    state: PerturbationGenerator,
    seed: int | None = None,
) -> PerturbationBatch:
    """Run the full generator for one condition (or one per image)."""
    eps = state.config.epsilon if epsilon is None else epsilon
    conditions = _broadcast_conditions(cond, len(x))
    dtype = next(state.parameters()).dtype
    e_t = stack_embeddings(conditions).to(dtype)
    delta = state(x.pixels.to(dtype), e_t, eps)
    return PerturbationBatch(delta=delta, epsilon=eps, conditions=conditions, seed=seed)


def masked_patch_count(num_patches: int, ratio: float) -> int:
    """``round(ratio * num_patches)`` with halves rounded away from zero."""
    return int(math.floor(ratio * num_patches + 0.5))


def patch_mask(
    shape: torch.Size | Sequence[int],
    patch_size: int,
    ratio: float,
    generator: torch.Generator,
    device: torch.device | str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Keep-mask of shape ``B x 1 x H x W`` with whole patches zeroed per image."""
    b, _, height, width = shape
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ArgumentError(f"image size {height}x{width} is not divisible by patch {patch_size}")
    if not 0 <= ratio <= 1:
        raise ArgumentError(f"mask ratio must be in [0, 1], got {ratio}")
    gh, gw = height // patch_size, width // patch_size
    k = masked_patch_count(gh * gw, ratio)
    keep = torch.ones(b, gh * gw, dtype=dtype)
    for i in range(b):
        keep[i, torch.randperm(gh * gw, generator=generator)[:k]] = 0
    keep = keep.view(b, 1, gh, gw)
    keep = keep.repeat_interleave(patch_size, dim=2).repeat_interleave(patch_size, dim=3)
    return keep.to(device)


def apply_patch_mask(
    p: PerturbationBatch, patch_size: int, ratio: float, seed: int
) -> PerturbationBatch:
    """Zero ``delta`` on a seeded random subset of patches in each image."""
    gen = torch.Generator().manual_seed(seed)
    mask = patch_mask(p.delta.shape, patch_size, ratio, gen, p.delta.device, p.delta.dtype)
    return PerturbationBatch(p.delta * mask, p.epsilon, p.conditions, seed)


def make_adversarial(x: ImageBatch, p: PerturbationBatch) -> ImageBatch:
    """``clamp(x + delta)`` as a new batch with the images' provenance."""
    if tuple(x.pixels.shape) != tuple(p.delta.shape):
        raise ShapeError(
            f"image batch {tuple(x.pixels.shape)} and perturbation {tuple(p.delta.shape)} differ"
        )
    return x.with_pixels(clamp_valid(x.pixels.to(p.delta.dtype) + p.delta))
