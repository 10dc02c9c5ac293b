"""Transfer evaluation: attack success rates, reports, ablations, visualization.

:func:`evaluate` generates perturbations once per target class, then scores
every (victim, defense) cell on the defended adversarial images. Victims are
only ever called through :class:`~promptpert.core.models.BlackBoxVictim`, so
no victim gradient is read.
"""

import hashlib
import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from joblib import Parallel, delayed

from ..utils.config import write_atomic, write_json_atomic
from ..utils.exceptions import ArgumentError, MappingError
from ..utils.logging import get_logger
from .checkpoint import Checkpoint, TargetClassSet
from .conditioning import TextEncoder
from .data import ImageBatch, ImageDataset, make_loader, write_image
from .defenses import DefenseSpec, apply_defense
from .generator import (
    GeneratorConfig,
    PerturbationBatch,
    PerturbationGenerator,
    build_generator,
    generate,
    make_adversarial,
)
from .models import BlackBoxVictim, Classifier

logger = get_logger()

VARIANTS: dict[str, dict[str, Any]] = {
    "full": {},
    "no_cross_attention": {"cross_attention_count": 0},
    "one_hot_condition": {"condition_mode": "one_hot"},
    "no_purifier": {"use_purifier": False},
    "no_fusion": {"use_fusion": False},
    "no_cross_attention_one_hot": {"cross_attention_count": 0, "condition_mode": "one_hot"},
}

REPORT_COLUMNS = [
    "surrogate",
    "victim",
    "target_class",
    "defense",
    "params",
    "n",
    "successes",
    "asr",
    "white_box",
    "epsilon",
]


@dataclass(frozen=True)
class SuccessCount:
    n: int
    successes: int

    @property
    def asr(self) -> float:
        return self.successes / self.n if self.n else 0.0


def victim_label(victim: BlackBoxVictim | Classifier, class_name: str) -> int:
    """Index of ``class_name`` in the victim's label space."""
    try:
        return victim.label_names.index(class_name)
    except ValueError:
        raise MappingError(
            f"class '{class_name}' is not in the label space of victim '{victim.name}'"
        ) from None


def attack_success_rate(
    x_adv: ImageBatch, victim: BlackBoxVictim | Classifier, target: int
) -> SuccessCount:
    """Count images whose victim prediction equals ``target``.

    Ties in the logits resolve to the lowest class index; they are logged.
    """
    if not isinstance(victim, BlackBoxVictim):
        victim = BlackBoxVictim(victim)
    num_labels = len(victim.label_names)
    if not 0 <= target < num_labels:
        raise MappingError(f"target index {target} outside victim '{victim.name}' labels [0, {num_labels})")
    logits = victim(x_adv.pixels)
    if logits.shape != (len(x_adv), num_labels):
        raise MappingError(
            f"victim '{victim.name}' returned logits {tuple(logits.shape)} for {num_labels} labels"
        )
    top = logits.max(dim=1, keepdim=True).values
    tied = int(((logits == top).sum(dim=1) > 1).sum())
    if tied:
        logger.debug("argmax ties resolved to lowest index", victim=victim.name, rows=tied)
    # torch.argmax returns the first maximal index.
    predicted = logits.argmax(dim=1)
    return SuccessCount(len(x_adv), int((predicted == target).sum()))


@dataclass(frozen=True)
class AttackRow:
    surrogate: str
    victim: str
    target_class: str
    defense: str
    params: dict[str, Any]
    n: int
    successes: int
    asr: float
    white_box: bool = False
    epsilon: float = 0.0


@dataclass
class AttackReport:
    """Rows of per-(victim, target, defense) counts plus run provenance."""

    rows: list[AttackRow]
    config_digest: str
    timestamp: str
    failures: list[dict[str, Any]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records = [{**asdict(r), "params": json.dumps(r.params, sort_keys=True)} for r in self.rows]
        return pd.DataFrame.from_records(records, columns=REPORT_COLUMNS)

    def mean_asr_by_victim(self) -> pd.DataFrame:
        """Per victim and defense, the arithmetic mean of per-target ASRs."""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["victim", "defense", "mean_asr", "targets", "white_box"])
        grouped = frame.groupby(["victim", "defense"], sort=False)
        table = grouped.agg(
            mean_asr=("asr", "mean"), targets=("target_class", "nunique"), white_box=("white_box", "any")
        )
        return table.reset_index()

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_digest": self.config_digest,
            "timestamp": self.timestamp,
            "rows": [asdict(r) for r in self.rows],
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "AttackReport":
        try:
            rows = [AttackRow(**row) for row in payload["rows"]]
            return cls(rows, payload["config_digest"], payload["timestamp"], payload.get("failures", []))
        except (KeyError, TypeError) as exc:
            raise ArgumentError(f"not an attack report: {exc}") from exc

    def to_json(self, path: str | Path) -> Path:
        return write_json_atomic(path, self.to_dict())

    def to_csv(self, path: str | Path) -> Path:
        frame = self.to_frame().drop(columns=["white_box", "epsilon"])
        return write_atomic(path, frame.to_csv(index=False).encode())

    @classmethod
    def read_json(cls, path: str | Path) -> "AttackReport":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ArgumentError(f"cannot read report '{path}': {exc}") from exc
        return cls.from_dict(payload)


def _iter_batches(images: ImageBatch | ImageDataset, batch_size: int) -> list[ImageBatch]:
    if isinstance(images, ImageBatch):
        starts = range(0, len(images), batch_size)
        return [images.select(range(i, min(i + batch_size, len(images)))) for i in starts]
    batches = []
    for pixels, _, indices in make_loader(images, batch_size, seed=0, shuffle=False):
        ids = tuple(images.image_id(int(i)) for i in indices)
        batches.append(ImageBatch(pixels, ids, images.domain_tag))
    return batches


def _score_cell(
    adversarial: list[ImageBatch],
    victim: BlackBoxVictim,
    label: int,
    defense: DefenseSpec,
) -> SuccessCount:
    n = successes = 0
    for batch in adversarial:
        count = attack_success_rate(apply_defense(batch, defense), victim, label)
        n += count.n
        successes += count.successes
    return SuccessCount(n, successes)


def _run_cell(*args: Any) -> SuccessCount | Exception:
    try:
        return _score_cell(*args)
    except Exception as exc:
        return exc


def evaluation_digest(
    ckpt: Checkpoint, targets: Sequence[str], defenses: Sequence[DefenseSpec], epsilon: float
) -> str:
    payload = {
        "checkpoint": ckpt.digest(),
        "targets": list(targets),
        "defenses": [d.model_dump() for d in defenses],
        "epsilon": epsilon,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@torch.no_grad()
def evaluate(
    ckpt: Checkpoint,
    victims: Sequence[Classifier | BlackBoxVictim],
    images: ImageBatch | ImageDataset,
    encoder: TextEncoder | None = None,
    targets: TargetClassSet | Sequence[str] | None = None,
    defenses: Sequence[DefenseSpec] | None = None,
    epsilon: float | None = None,
    batch_size: int = 64,
    n_jobs: int = 1,
    config_digest: str | None = None,
) -> AttackReport:
    """Score the checkpoint against every victim, target class and defense.

    A victim whose label space lacks a target class is rejected before any
    work starts. A victim that fails while being scored is recorded in
    ``failures`` with the target it failed on and the targets it finished;
    its finished rows and every other victim's rows are still returned.

    Args:
        ckpt: Trained generator checkpoint.
        victims: Classifiers to attack; the surrogate itself yields white-box rows.
        images: Evaluation images, possibly from another domain than training.
        encoder: Text encoder for text-conditioned checkpoints.
        targets: Subset of the checkpoint's target classes; all by default.
        defenses: Preprocessing defenses; ``[none]`` by default.
        epsilon: Budget override; the checkpoint's budget by default.
        batch_size: Images per generator/victim call.
        n_jobs: Parallel threads over (victim, defense) cells.
        config_digest: Provenance digest stored in the report.

    Raises:
        ArgumentError: No victims, fewer than one job, or an unknown target class.
        MappingError: A target class is missing from a victim's label space.
    """
    if not victims:
        raise ArgumentError("at least one victim is required")
    if n_jobs < 1:
        raise ArgumentError(f"n_jobs must be >= 1, got {n_jobs}")
    wrapped = [v if isinstance(v, BlackBoxVictim) else BlackBoxVictim(v) for v in victims]
    if isinstance(targets, TargetClassSet):
        target_names = list(targets.names)
    else:
        target_names = list(ckpt.target_classes.names) if targets is None else list(targets)
    positions = [ckpt.target_classes.position(name) for name in target_names]
    labels = {(v.name, t): victim_label(v, t) for v in wrapped for t in target_names}
    defense_list = list(defenses) if defenses else [DefenseSpec()]
    eps = ckpt.generator_config.epsilon if epsilon is None else epsilon
    if eps < 0:
        raise ArgumentError(f"epsilon must be non-negative, got {eps}")

    generator = ckpt.build_generator()
    conditions = ckpt.conditions(encoder)
    clean = _iter_batches(images, batch_size)
    if not clean:
        raise ArgumentError("evaluation image set is empty")
    surrogate = ckpt.surrogate_name or ""

    rows: list[AttackRow] = []
    failed: dict[str, dict[str, Any]] = {}
    completed: dict[str, list[str]] = {v.name: [] for v in wrapped}
    for name, position in zip(target_names, positions):
        condition = conditions[position]
        adversarial = [make_adversarial(b, generate(b, condition, eps, generator)) for b in clean]
        cells = [(v, d) for v in wrapped if v.name not in failed for d in defense_list]
        results = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_run_cell)(adversarial, v, labels[(v.name, name)], d) for v, d in cells
        )
        for (victim, defense), result in zip(cells, results):
            if isinstance(result, Exception):
                if victim.name not in failed:
                    failed[victim.name] = {
                        "victim": victim.name,
                        "error": f"{type(result).__name__}: {result}",
                        "target_class": name,
                        "completed_targets": list(completed[victim.name]),
                    }
                logger.error(f"victim {victim.name} failed", target=name, error=str(result))
                continue
            rows.append(
                AttackRow(
                    surrogate=surrogate,
                    victim=victim.name,
                    target_class=name,
                    defense=defense.label,
                    params=defense.params,
                    n=result.n,
                    successes=result.successes,
                    asr=result.asr,
                    white_box=victim.name == surrogate,
                    epsilon=eps,
                )
            )
        for victim_name in {v.name for v, _ in cells} - set(failed):
            completed[victim_name].append(name)
        logger.info("evaluated target", target=name, victims=len(cells) // len(defense_list))

    return AttackReport(
        rows=rows,
        config_digest=config_digest or evaluation_digest(ckpt, target_names, defense_list, eps),
        timestamp=datetime.now(timezone.utc).isoformat(),
        failures=list(failed.values()),
    )


def build_variant(kind: str, base: GeneratorConfig | None = None, seed: int = 0) -> PerturbationGenerator:
    """A generator with one component ablated.

    Kinds: ``full``, ``no_cross_attention``, ``one_hot_condition``,
    ``no_purifier``, ``no_fusion`` and ``no_cross_attention_one_hot``.
    """
    if kind not in VARIANTS:
        raise ArgumentError(f"unknown variant '{kind}'; choose from {', '.join(VARIANTS)}")
    config = (base or GeneratorConfig()).model_copy(update={**VARIANTS[kind], "variant": kind})
    return build_generator(GeneratorConfig.model_validate(config.model_dump()), seed)


def perturbation_panel(p: PerturbationBatch) -> torch.Tensor:
    """Map ``delta`` to displayable pixels via ``(delta / epsilon + 1) / 2``."""
    if p.epsilon == 0:
        return torch.full_like(p.delta, 0.5)
    return ((p.delta / p.epsilon + 1) / 2).clamp(0, 1)


def visualize(p: PerturbationBatch, x: ImageBatch, path: str | Path) -> Path:
    """Write a PNG with one row per image: [perturbation | adversarial image].

    Raises:
        ShapeError: Batch shapes differ.
        OSError: ``path`` is not writable.
    """
    x_adv = make_adversarial(x, p)
    panels = perturbation_panel(p).detach()
    rows = [torch.cat([panels[i], x_adv.pixels[i].detach()], dim=-1) for i in range(len(p))]
    return write_image(torch.cat(rows, dim=-2), path)


__all__ = [
    "AttackReport",
    "AttackRow",
    "SuccessCount",
    "VARIANTS",
    "attack_success_rate",
    "build_variant",
    "evaluate",
    "perturbation_panel",
    "visualize",
]
