"""CLI utility functions.

Exit-code mapping, console rendering and the small amount of wiring shared by
several subcommands (encoder resolution, classifier construction, config
snapshots).
"""

import functools
import pickle
import re
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

from rich.console import Console
from rich.table import Table

from ..core.conditioning import TextEncoder, get_text_encoder
from ..core.data import ImageDataset
from ..core.evaluation import AttackReport
from ..core.models import Classifier, ClassifierSpec, build_classifier
from ..utils.config import write_json_atomic
from ..utils.exceptions import ArgumentError, ConfigError, PromptPertError
from ..utils.logging import get_logger
from .config import RunConfig

console = Console()
logger = get_logger()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

F = TypeVar("F", bound=Callable[..., Any])


def exit_code_for(exc: BaseException) -> int:
    """2 for configuration/argument errors, 1 for everything else."""
    if isinstance(exc, ConfigError | ArgumentError):
        return EXIT_USAGE
    return EXIT_RUNTIME


def handle_errors(func: F) -> F:
    """Print failures with rich and exit with the stable exit code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except PromptPertError as exc:
            console.print(f"[red]❌ Error: {exc}[/red]")
            sys.exit(exit_code_for(exc))
        except (OSError, RuntimeError, ValueError, pickle.UnpicklingError) as exc:
            console.print(f"[red]❌ Error: {exc}[/red]")
            logger.debug("unexpected failure", error=repr(exc))
            sys.exit(EXIT_RUNTIME)

    return wrapper  # type: ignore[return-value]


def slug(name: str) -> str:
    """Filesystem-friendly form of a class name."""
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-").lower() or "class"


def resolve_encoder(spec: str, seed: int, condition_mode: str) -> TextEncoder | None:
    """The text encoder a checkpoint or config needs; ``None`` for one-hot."""
    if condition_mode == "one_hot":
        return None
    return get_text_encoder(spec, seed=seed)


def load_classifier_spec(
    spec: ClassifierSpec, dataset: ImageDataset, cache_dir: Path, role: str
) -> Classifier:
    """Build a surrogate or victim, naming it in any failure."""
    try:
        return build_classifier(spec, dataset, cache_dir=cache_dir)
    except PromptPertError as exc:
        raise PromptPertError(f"{role} '{spec.name}' could not be built: {exc}") from exc


def write_snapshot(cfg: RunConfig, output_dir: Path, command: str) -> Path:
    """Write ``resolved_config.json`` next to the command's outputs."""
    payload = {"command": command, "config": cfg.model_dump(mode="json")}
    return write_json_atomic(output_dir / "resolved_config.json", payload)


def summary_table(title: str, rows: dict[str, Any]) -> Table:
    table = Table(title=title, show_header=False)
    table.add_column("key", style="cyan")
    table.add_column("value")
    for key, value in rows.items():
        table.add_row(key, str(value))
    return table


def report_table(report: AttackReport) -> Table:
    """Per-victim mean ASR over targets; white-box victims carry a ``*``."""
    summary = report.mean_asr_by_victim()
    table = Table(title="Mean targeted ASR")
    for column in ("victim", "defense", "targets", "mean ASR"):
        table.add_column(column)
    for record in summary.itertuples(index=False):
        victim = f"{record.victim}*" if record.white_box else record.victim
        table.add_row(victim, record.defense, str(record.targets), f"{record.mean_asr:.4f}")
    return table


def print_report(report: AttackReport) -> None:
    console.print(report_table(report))
    if any(r.white_box for r in report.rows):
        console.print("[dim]* white-box: the victim is the training surrogate[/dim]")
    for failure in report.failures:
        console.print(f"[red]victim {failure['victim']} failed: {failure['error']}[/red]")
        finished = failure.get("completed_targets") or []
        if finished:
            console.print(f"[dim]  rows kept for: {', '.join(finished)}[/dim]")
