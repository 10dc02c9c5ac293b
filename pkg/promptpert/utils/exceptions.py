"""Custom exception classes.

Every error raised by promptpert derives from :class:`PromptPertError`, so
callers (and the CLI) can separate expected failures from programming bugs.

Example:
    >>> from promptpert.utils.exceptions import ArgumentError
    >>> try:
    ...     raise ArgumentError("epsilon must be non-negative")
    ... except ValueError as exc:
    ...     print(exc)
    epsilon must be non-negative
"""


class PromptPertError(Exception):
    """Base class for all promptpert errors."""


class ArgumentError(PromptPertError, ValueError):
    """A precondition on an argument was violated."""


class ShapeError(PromptPertError, ValueError):
    """Tensor shapes, widths or divisibility do not line up."""


class ConfigError(PromptPertError):
    """Invalid run configuration.

    Attributes:
        errors: Field-level messages, e.g. ``["train.epochs: Field required"]``.
    """

    def __init__(self, message: str, errors: list[str] | None = None):
        self.errors = errors or []
        detail = "\n".join(f"  - {e}" for e in self.errors)
        super().__init__(f"{message}\n{detail}" if detail else message)


class DataLoadError(PromptPertError):
    """An image file could not be read or decoded."""

    def __init__(self, path: object, reason: str):
        self.path = str(path)
        super().__init__(f"Cannot load image '{self.path}': {reason}")


class EncoderError(PromptPertError):
    """The text encoder is unavailable or not initialized."""


class TrainingError(PromptPertError):
    """Training diverged.

    Attributes:
        step: Global step index at which the failure was detected.
    """

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class CheckpointError(PromptPertError):
    """A checkpoint archive is corrupt, truncated, or missing a field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"checkpoint field '{field}': {message}")


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by a newer format version."""


class MappingError(PromptPertError):
    """A target class cannot be mapped into a classifier's label space."""


class DefenseError(PromptPertError):
    """A preprocessing defense failed (e.g. the JPEG codec)."""
