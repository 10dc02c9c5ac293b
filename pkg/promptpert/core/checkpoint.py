"""Checkpoint archives.

A checkpoint is one zip file holding every generator tensor as a ``.npy``
member plus a versioned ``metadata.json`` (architecture, training config,
target classes, prompt template, encoder, seeds, fine-tuning tag). Members are
written uncompressed with a fixed timestamp, so identical state gives an
identical file and :meth:`Checkpoint.digest` is a stable run fingerprint.
"""

import hashlib
import io
import json
import zipfile
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import ValidationError

from ..utils.config import write_atomic
from ..utils.exceptions import ArgumentError, CheckpointError, CheckpointVersionError, MappingError
from .conditioning import (
    DEFAULT_TEMPLATE,
    TextCondition,
    TextEncoder,
    build_conditions,
)
from .generator import GeneratorConfig, PerturbationGenerator

FORMAT_VERSION = 1
METADATA_MEMBER = "metadata.json"
ARRAY_PREFIX = "arrays/"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_REQUIRED = (
    "format_version",
    "generator_config",
    "train_config",
    "target_classes",
    "prompt_template",
    "text_encoder",
    "seed",
    "arrays",
)


@dataclass(frozen=True)
class TargetClassSet:
    """Ordered target class names with their surrogate label indices."""

    names: tuple[str, ...]
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.names:
            raise ArgumentError("target class set is empty")
        if len(self.names) != len(self.indices):
            raise ArgumentError("names and indices differ in length")
        if any(not n for n in self.names):
            raise ArgumentError("target class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ArgumentError(f"duplicate target classes in {list(self.names)}")

    @classmethod
    def resolve(cls, names: Sequence[str] | None, label_names: Sequence[str]) -> "TargetClassSet":
        """Map names onto a label space; ``None`` means every label."""
        chosen = list(label_names) if names is None else list(names)
        lookup = {name: i for i, name in enumerate(label_names)}
        missing = [n for n in chosen if n not in lookup]
        if missing:
            raise MappingError(f"classes {missing} are not in the label space {list(label_names)}")
        return cls(tuple(chosen), tuple(lookup[n] for n in chosen))

    def __len__(self) -> int:
        return len(self.names)

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ArgumentError(
                f"unknown class '{name}'; available: {', '.join(self.names)}"
            ) from None

    def to_dict(self) -> dict[str, list[Any]]:
        return {"names": list(self.names), "indices": list(self.indices)}


@dataclass(frozen=True)
class Checkpoint:
    """Generator tensors plus everything needed to rebuild and condition it."""

    state: dict[str, torch.Tensor]
    generator_config: GeneratorConfig
    train_config: dict[str, Any]
    target_classes: TargetClassSet
    prompt_template: str = DEFAULT_TEMPLATE
    text_encoder: str = "stub"
    encoder_seed: int = 0
    seed: int = 0
    surrogate_name: str | None = None
    finetune: dict[str, Any] | None = None
    format_version: int = FORMAT_VERSION
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_generator(cls, generator: PerturbationGenerator, **metadata: Any) -> "Checkpoint":
        state = {k: v.detach().cpu().clone().contiguous() for k, v in generator.state_dict().items()}
        return cls(state=state, generator_config=generator.config, **metadata)

    def build_generator(self) -> PerturbationGenerator:
        """Rebuild the generator in eval mode."""
        generator = PerturbationGenerator(self.generator_config)
        try:
            generator.load_state_dict(self.state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError("arrays", str(exc)) from exc
        return generator.eval()

    def conditions(self, encoder: TextEncoder | None) -> list[TextCondition]:
        """One condition per target class, in target-set order."""
        return build_conditions(
            self.target_classes.names,
            self.generator_config.condition_mode,
            encoder,
            self.prompt_template,
        )

    def with_updates(self, **changes: Any) -> "Checkpoint":
        return replace(self, **changes)

    def metadata(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "generator_config": self.generator_config.model_dump(mode="json"),
            "train_config": self.train_config,
            "target_classes": self.target_classes.to_dict(),
            "prompt_template": self.prompt_template,
            "text_encoder": self.text_encoder,
            "encoder_seed": self.encoder_seed,
            "seed": self.seed,
            "surrogate_name": self.surrogate_name,
            "finetune": self.finetune,
            "extra": self.extra,
            "arrays": {k: list(v.shape) for k, v in sorted(self.state.items())},
        }

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as zf:
            meta = json.dumps(self.metadata(), sort_keys=True, indent=2, default=str)
            zf.writestr(zipfile.ZipInfo(METADATA_MEMBER, _ZIP_EPOCH), meta)
            for name in sorted(self.state):
                array_bytes = io.BytesIO()
                np.lib.format.write_array(array_bytes, self.state[name].numpy(), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{ARRAY_PREFIX}{name}.npy", _ZIP_EPOCH), array_bytes.getvalue())
        return buffer.getvalue()

    def digest(self) -> str:
        """SHA-256 of the serialized archive."""
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write the archive atomically (temp file + rename)."""
    return write_atomic(path, ckpt.to_bytes())


def _require(meta: dict[str, Any], key: str) -> Any:
    if key not in meta:
        raise CheckpointError(key, "missing")
    return meta[key]


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and fully validate an archive; nothing is returned on failure.

    Raises:
        CheckpointVersionError: The archive's format version is newer than supported.
        CheckpointError: Unreadable/truncated archive or missing/invalid field.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            broken = zf.testzip()
            if broken is not None:
                raise CheckpointError(broken, "CRC mismatch")
            try:
                meta = json.loads(zf.read(METADATA_MEMBER))
            except KeyError:
                raise CheckpointError("metadata", f"archive has no {METADATA_MEMBER}") from None
            except json.JSONDecodeError as exc:
                raise CheckpointError("metadata", f"invalid JSON ({exc})") from exc

            version = _require(meta, "format_version")
            if not isinstance(version, int):
                raise CheckpointError("format_version", f"expected an integer, got {version!r}")
            if version > FORMAT_VERSION:
                raise CheckpointVersionError(
                    "format_version",
                    f"archive version {version} is newer than supported version {FORMAT_VERSION}",
                )
            for key in _REQUIRED:
                _require(meta, key)

            state: dict[str, torch.Tensor] = {}
            for name, shape in meta["arrays"].items():
                try:
                    with zf.open(f"{ARRAY_PREFIX}{name}.npy") as member:
                        array = np.lib.format.read_array(io.BytesIO(member.read()), allow_pickle=False)
                except (KeyError, ValueError) as exc:
                    raise CheckpointError(name, f"unreadable array ({exc})") from exc
                if list(array.shape) != list(shape):
                    raise CheckpointError(name, f"shape {array.shape} != recorded {shape}")
                state[name] = torch.from_numpy(array.copy())
    except (zipfile.BadZipFile, EOFError, OSError) as exc:
        raise CheckpointError("archive", f"cannot read '{path}': {exc}") from exc

    try:
        generator_config = GeneratorConfig.model_validate(meta["generator_config"])
    except ValidationError as exc:
        raise CheckpointError("generator_config", str(exc)) from exc
    try:
        targets = TargetClassSet(
            tuple(meta["target_classes"]["names"]), tuple(meta["target_classes"]["indices"])
        )
    except (KeyError, TypeError, ArgumentError) as exc:
        raise CheckpointError("target_classes", str(exc)) from exc

    ckpt = Checkpoint(
        state=state,
        generator_config=generator_config,
        train_config=meta["train_config"],
        target_classes=targets,
        prompt_template=meta["prompt_template"],
        text_encoder=meta["text_encoder"],
        encoder_seed=meta.get("encoder_seed", 0),
        seed=meta["seed"],
        surrogate_name=meta.get("surrogate_name"),
        finetune=meta.get("finetune"),
        format_version=version,
        extra=meta.get("extra", {}),
    )
    ckpt.build_generator()
    return ckpt
