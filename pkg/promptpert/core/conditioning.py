"""Text conditioning.

Turns a target-class name into a prompt, the prompt into a 512-d text
embedding through a pluggable :class:`TextEncoder`, and that embedding into the
16-d purified embedding the image encoder fuses in. The purifier is a chain of
spectrally normalized affine blocks with leaky-ReLU activations.
"""

import hashlib
from abc import ABC, abstractmethod
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.exceptions import ArgumentError, EncoderError, ShapeError
from ..utils.logging import get_logger

TEXT_DIM = 512
PURIFIED_DIM = 16
PLACEHOLDER = "{class}"
DEFAULT_TEMPLATE = "a photo of a {class}"
DEFAULT_PURIFIER_WIDTHS = (TEXT_DIM, 128, 32, PURIFIED_DIM)

logger = get_logger()


@dataclass(frozen=True)
class TextCondition:
    """A target class with its rendered prompt and 512-d embedding."""

    class_name: str
    prompt: str
    embedding: torch.Tensor

    def __post_init__(self) -> None:
        if self.embedding.dim() != 1 or self.embedding.shape[0] != TEXT_DIM:
            raise ShapeError(
                f"condition embedding must have length {TEXT_DIM}, "
                f"got shape {tuple(self.embedding.shape)}"
            )


def build_prompt(class_name: str, template: str = DEFAULT_TEMPLATE) -> str:
    """Substitute ``class_name`` for the single ``{class}`` placeholder."""
    if not class_name:
        raise ArgumentError("class_name must be non-empty")
    if template.count(PLACEHOLDER) != 1:
        raise ArgumentError(f"template must contain '{PLACEHOLDER}' exactly once: {template!r}")
    return template.replace(PLACEHOLDER, class_name)


class TextEncoder(ABC):
    """Maps prompts to ``len(prompts) x 512`` embeddings."""

    name: str = "abstract"
    dim: int = TEXT_DIM
    ready: bool = True

    @abstractmethod
    def encode(self, prompts: Sequence[str]) -> torch.Tensor:
        """Encode a list of prompts."""


class HashTextEncoder(TextEncoder):
    """Deterministic stand-in encoder.

    Each prompt seeds a Gaussian draw from a SHA-256 of ``(seed, prompt)``;
    the vector is l2-normalized. Distinct prompts give nearly orthogonal
    vectors, which is all the conditioning path needs at desk scale.
    """

    name = "stub"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def encode(self, prompts: Sequence[str]) -> torch.Tensor:
        rows = []
        for prompt in prompts:
            digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode()).digest()
            gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "big") >> 1)
            vec = torch.randn(self.dim, generator=gen, dtype=torch.float64)
            rows.append((vec / vec.norm()).float())
        return torch.stack(rows) if rows else torch.empty(0, self.dim)


_ENCODER_PLUGINS: dict[str, Callable[..., TextEncoder]] = {}


def register_text_encoder(name: str) -> Callable[[Callable[..., TextEncoder]], Callable[..., TextEncoder]]:
    """Class decorator registering a factory under ``plugin:<name>``."""

    def decorator(factory: Callable[..., TextEncoder]) -> Callable[..., TextEncoder]:
        _ENCODER_PLUGINS[name] = factory
        return factory

    return decorator


@register_text_encoder("clip")
class ClipTextEncoder(TextEncoder):
    """Frozen CLIP ViT-B/32 text tower (pooled output, 512-d).

    Needs the optional ``transformers`` dependency and downloadable weights.
    """

    name = "plugin:clip"

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu", **_: object):
        try:
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise EncoderError("plugin:clip needs the 'transformers' package") from exc

        self.device = device
        self.tokenizer = CLIPTokenizer.from_pretrained(model_name)
        self.model = CLIPTextModel.from_pretrained(model_name).to(device).eval()
        for param in self.model.parameters():
            param.requires_grad = False

    @torch.no_grad()
    def encode(self, prompts: Sequence[str]) -> torch.Tensor:
        tokens = self.tokenizer(list(prompts), padding=True, truncation=True, return_tensors="pt")
        tokens = {k: v.to(self.device) for k, v in tokens.items()}
        return self.model(**tokens).pooler_output.float().cpu()


def get_text_encoder(spec: str = "stub", seed: int = 0, **kwargs: object) -> TextEncoder:
    """Resolve ``stub``, ``clip`` or ``plugin:<name>`` to an encoder instance."""
    if spec == "stub":
        return HashTextEncoder(seed=seed)
    if spec == "clip":
        spec = "plugin:clip"
    if spec.startswith("plugin:"):
        name = spec.split(":", 1)[1]
        factory = _ENCODER_PLUGINS.get(name)
        logger.info("loading text encoder plugin", name=name, found=factory is not None)
        if factory is None:
            raise EncoderError(
                f"unknown text encoder plugin '{name}'; available: {sorted(_ENCODER_PLUGINS)}"
            )
        return factory(**kwargs)
    raise EncoderError(f"text_encoder must be 'stub', 'clip' or 'plugin:<name>', got '{spec}'")


def encode_text(prompt: str, encoder: TextEncoder | None) -> torch.Tensor:
    """Embed one prompt as a 512-d vector."""
    if encoder is None or not getattr(encoder, "ready", False):
        raise EncoderError("text encoder is unavailable or not initialized")
    vec = encoder.encode([prompt])[0]
    if vec.shape != (TEXT_DIM,):
        raise EncoderError(f"encoder '{encoder.name}' returned shape {tuple(vec.shape)}")
    return vec


def make_condition(class_name: str, encoder: TextEncoder, template: str = DEFAULT_TEMPLATE) -> TextCondition:
    prompt = build_prompt(class_name, template)
    return TextCondition(class_name, prompt, encode_text(prompt, encoder))


def one_hot_condition(
    class_name: str, index: int, num_classes: int, template: str = DEFAULT_TEMPLATE
) -> TextCondition:
    """Label condition: a one-hot over ``num_classes`` zero-padded to 512."""
    if not 0 <= index < num_classes <= TEXT_DIM:
        raise ArgumentError(f"one-hot index {index} invalid for {num_classes} classes")
    vec = torch.zeros(TEXT_DIM)
    vec[index] = 1.0
    return TextCondition(class_name, build_prompt(class_name, template), vec)


def stack_embeddings(conditions: Sequence[TextCondition]) -> torch.Tensor:
    return torch.stack([c.embedding for c in conditions])


def spectral_normalize(
    weight: torch.Tensor,
    state: tuple[torch.Tensor, torch.Tensor] | None = None,
    iters: int = 1,
    eps: float = 1e-12,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """Divide ``weight`` by its power-iteration top singular value estimate.

    Args:
        weight: ``out x in`` matrix (higher-rank weights are flattened).
        state: Left/right power-iteration vectors ``(u, v)``; drawn at random
            when omitted.
        iters: Power iterations to run, at least 1.
        eps: Normalization floor.
        generator: RNG for the initial ``u`` when ``state`` is omitted.

    Returns:
        The normalized weight (differentiable w.r.t. ``weight``) and the updated
        unit-norm ``(u, v)``. A zero matrix is returned unchanged with its state.
    """
    if iters < 1:
        raise ArgumentError(f"iters must be >= 1, got {iters}")
    mat = weight.reshape(weight.shape[0], -1)
    if state is None:
        u0 = torch.randn(mat.shape[0], generator=generator, dtype=mat.dtype)
        state = (F.normalize(u0, dim=0, eps=eps), torch.zeros(mat.shape[1], dtype=mat.dtype))
    u, v = state

    with torch.no_grad():
        for _ in range(iters):
            v_next = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u_next = F.normalize(mat @ v_next, dim=0, eps=eps)
            if u_next.norm() < 0.5:
                # zero matrix: nothing to normalize
                return weight, state
            u, v = u_next, v_next
        u, v = u.clone(), v.clone()

    sigma = torch.dot(u, mat @ v)
    if sigma.detach().abs() <= eps:
        return weight, (u, v)
    return weight / sigma, (u, v)


class SpectralLinear(nn.Module):
    """Affine layer whose weight is spectrally normalized on every forward.

    Training mode runs ``n_power_iterations`` and stores the updated vectors;
    eval mode reuses the stored vectors, so the layer is a fixed function.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        n_power_iterations: int = 1,
        warmup_iterations: int = 50,
    ):
        super().__init__()
        linear = nn.Linear(in_features, out_features)
        self.in_features = in_features
        self.out_features = out_features
        self.n_power_iterations = n_power_iterations
        self.weight = nn.Parameter(linear.weight.detach().clone())
        self.bias = nn.Parameter(linear.bias.detach().clone())
        self.register_buffer("u", F.normalize(torch.randn(out_features), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(in_features), dim=0))
        self.refresh(warmup_iterations)

    @torch.no_grad()
    def refresh(self, iters: int = 50) -> None:
        """Re-converge the power-iteration vectors, e.g. after editing weights."""
        _, (u, v) = spectral_normalize(self.weight, (self.u, self.v), iters)
        self.u.copy_(u)
        self.v.copy_(v)

    def normalized_weight(self) -> torch.Tensor:
        if self.training:
            with torch.no_grad():
                _, (u, v) = spectral_normalize(self.weight, (self.u, self.v), self.n_power_iterations)
                self.u.copy_(u)
                self.v.copy_(v)
        # Buffers are updated in place on the next training forward; autograd
        # must hold copies.
        sigma = torch.dot(self.u.clone(), self.weight @ self.v.clone())
        if sigma.detach().abs() <= 1e-12:
            return self.weight
        return self.weight / sigma

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.normalized_weight(), self.bias)


class VLPurifier(nn.Module):
    """512 -> 16 chain of (spectral affine -> leaky-ReLU) blocks."""

    def __init__(
        self,
        widths: Sequence[int] = DEFAULT_PURIFIER_WIDTHS,
        negative_slope: float = 0.2,
        n_power_iterations: int = 1,
    ):
        super().__init__()
        if len(widths) < 2:
            raise ArgumentError("purifier needs at least an input and an output width")
        self.widths = tuple(widths)
        self.negative_slope = negative_slope
        self.blocks = nn.ModuleList(
            SpectralLinear(a, b, n_power_iterations=n_power_iterations)
            for a, b in zip(self.widths[:-1], self.widths[1:], strict=True)
        )

    @property
    def in_features(self) -> int:
        return self.widths[0]

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    def forward(self, e_t: torch.Tensor) -> torch.Tensor:
        out = e_t
        for block in self.blocks:
            out = F.leaky_relu(block(out), self.negative_slope)
        return out


def purify(e_t: torch.Tensor, params: VLPurifier) -> torch.Tensor:
    """Refine ``B x 512`` text embeddings into the ``B x 16`` purified embedding."""
    if e_t.dim() != 2 or e_t.shape[1] != params.in_features:
        raise ShapeError(
            f"purifier expects B x {params.in_features} input, got {tuple(e_t.shape)}"
        )
    return params(e_t)


def build_conditions(
    class_names: Sequence[str],
    mode: str,
    encoder: TextEncoder | None,
    template: str = DEFAULT_TEMPLATE,
) -> list[TextCondition]:
    """Conditions for an ordered class list: text embeddings or one-hot labels."""
    if mode == "one_hot":
        return [
            one_hot_condition(name, i, len(class_names), template)
            for i, name in enumerate(class_names)
        ]
    if mode != "text":
        raise ArgumentError(f"unknown condition mode '{mode}'")
    if encoder is None:
        raise EncoderError("text conditioning needs a text encoder")
    return [make_condition(name, encoder, template) for name in class_names]
