"""Run configuration: one JSON document, validated before any work starts.

Sections mirror the library's own config models; unknown keys are rejected
everywhere. Command-line flags are applied as dotted-path overrides on the raw
document before validation, so flags always win.
"""

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core.conditioning import DEFAULT_TEMPLATE
from ..core.data import DatasetSpec
from ..core.defenses import DefenseSpec
from ..core.generator import GeneratorConfig
from ..core.models import ClassifierSpec
from ..core.training import FinetuneConfig, TrainConfig
from ..utils.exceptions import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    train: DatasetSpec = Field(default_factory=DatasetSpec)
    eval: DatasetSpec | None = None

    def eval_spec(self) -> DatasetSpec:
        """Evaluation images; the training source's eval split unless set."""
        if self.eval is not None:
            return self.eval
        return self.train.model_copy(update={"split": "eval"})


class ConditioningSection(_Section):
    prompt_template: str = DEFAULT_TEMPLATE
    text_encoder: str = "stub"
    encoder_seed: int = 0
    attention_tokens: int | None = Field(default=None, ge=1)


class TrainSection(TrainConfig):
    """Training settings; ``epochs`` is required in a config file."""

    epochs: int = Field(ge=1)
    surrogate: ClassifierSpec = Field(
        default_factory=lambda: ClassifierSpec(name="surrogate")
    )
    num_workers: int = Field(default=0, ge=0)


class EvalSection(_Section):
    victims: list[ClassifierSpec] = Field(default_factory=list)
    defenses: list[DefenseSpec] = Field(default_factory=lambda: [DefenseSpec()])
    epsilon: float | None = Field(default=None, ge=0, le=1)
    targets: list[str] | None = None
    batch_size: int = Field(default=64, ge=1)
    n_jobs: int = Field(default=1, ge=1)


class LoggingSection(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    file: Path | None = None
    use_rich: bool = True


class RunConfig(_Section):
    """The whole run: data, conditioning, generator, train, finetune, eval."""

    data: DataSection = Field(default_factory=DataSection)
    conditioning: ConditioningSection = Field(default_factory=ConditioningSection)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    train: TrainSection | None = None
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    eval: EvalSection = Field(default_factory=EvalSection)
    logging: LoggingSection = Field(default_factory=LoggingSection)
    seed: int = 0
    output_dir: Path = Path("runs/default")

    @model_validator(mode="after")
    def _propagate(self) -> "RunConfig":
        # The root seed reaches sections that did not set their own.
        if self.train is not None and "seed" not in self.train.model_fields_set:
            self.train = self.train.model_copy(update={"seed": self.seed})
        if "seed" not in self.finetune.model_fields_set:
            self.finetune = self.finetune.model_copy(update={"seed": self.seed})
        tokens = self.conditioning.attention_tokens
        if tokens is not None and tokens != self.generator.attention_tokens:
            self.generator = GeneratorConfig.model_validate(
                {**self.generator.model_dump(), "attention_tokens": tokens}
            )
        return self

    def require_train(self) -> TrainSection:
        if self.train is None:
            raise ConfigError("invalid configuration", ["train: section required"])
        return self.train

    def generator_config(self) -> GeneratorConfig:
        """Generator architecture with the training budget applied."""
        if self.train is None:
            return self.generator
        return self.generator.model_copy(update={"epsilon": self.train.epsilon})

    def train_config(self) -> TrainConfig:
        section = self.require_train()
        return TrainConfig.model_validate(
            section.model_dump(exclude={"surrogate", "num_workers"})
        )


def set_dotted(document: dict[str, Any], path: str, value: Any) -> None:
    """Set ``document[a][b][c] = value`` for ``path == "a.b.c"``."""
    keys = path.split(".")
    node = document
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def format_errors(exc: ValidationError) -> list[str]:
    return [
        f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
        for err in exc.errors()
    ]


def parse_run_config(
    document: dict[str, Any], overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Validate a raw config document after applying dotted overrides.

    Raises:
        ConfigError: Listing every offending field path.
    """
    raw = json.loads(json.dumps(document))
    for path, value in (overrides or {}).items():
        if value is not None:
            set_dotted(raw, path, value)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError("invalid configuration", format_errors(exc)) from exc


def load_run_config(
    path: str | Path | None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Read a JSON config file (or start from defaults when ``path`` is None)."""
    document: dict[str, Any] = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config '{path}' is not valid JSON: {exc}") from exc
        if not isinstance(document, dict):
            raise ConfigError(f"config '{path}' must hold a JSON object")
    return parse_run_config(document, overrides)
