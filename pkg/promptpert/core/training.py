"""Generator training against a frozen white-box surrogate.

:class:`Trainer` performs one multi-target step: sample targets per image,
perturb the clean and the augmented batch, and minimize the mean of the two
targeted cross-entropy losses on the surrogate. :func:`train` runs it for the
configured epochs and checkpoints after every epoch; :func:`masked_finetune`
specializes a trained checkpoint to one class with patch-masked perturbations.
"""

import json
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from ..utils.config import derive_seed, deterministic_mode, deterministic_requested
from ..utils.exceptions import ArgumentError, MappingError, TrainingError
from ..utils.logging import get_logger
from .checkpoint import Checkpoint, TargetClassSet, save_checkpoint
from .conditioning import (
    DEFAULT_TEMPLATE,
    TextCondition,
    TextEncoder,
    build_conditions,
    one_hot_condition,
    stack_embeddings,
)
from .data import ImageBatch, ImageDataset, augment, clamp_valid, make_loader
from .generator import (
    DEFAULT_EPSILON,
    GeneratorConfig,
    PerturbationGenerator,
    build_generator,
    patch_mask,
)
from .models import Classifier

logger = get_logger()


class TrainConfig(BaseModel):
    """Multi-target training settings (Adam, no weight decay, no schedule)."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=10, ge=1)
    learning_rate: float = Field(default=2e-4, ge=0)
    batch_size: int = Field(default=16, ge=1)
    epsilon: float = Field(default=DEFAULT_EPSILON, gt=0, le=1)
    target_classes: list[str] | None = None
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    use_augmented_branch: bool = True
    flip_prob: float = Field(default=0.5, ge=0, le=1)
    scale_min: float = Field(default=0.8, gt=0, le=1)
    max_steps: int | None = Field(default=None, ge=1)
    log_every: int = Field(default=50, ge=1)
    deterministic: bool = False
    debug_checks: bool = False


class FinetuneConfig(BaseModel):
    """Single-class fine-tuning settings; ``mask_ratio=0`` is plain fine-tuning."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=5, ge=1)
    mask_ratio: float = Field(default=0.2, ge=0, le=1)
    patch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=2e-4, ge=0)
    batch_size: int | None = Field(default=None, ge=1)
    seed: int = 0
    max_steps: int | None = Field(default=None, ge=1)


@dataclass(frozen=True)
class MaskSettings:
    patch_size: int
    ratio: float
    seed: int


@dataclass(frozen=True)
class StepMetrics:
    """What one optimizer step reports."""

    step: int
    epoch: int
    loss: float
    hit_rate: float
    timestamp: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class MetricsLog:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, metrics: StepMetrics) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")


def targeted_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the logits against the target labels."""
    if logits.dim() != 2 or targets.shape != (logits.shape[0],):
        raise ArgumentError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} mismatch")
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ArgumentError(f"target indices must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, targets)


class Trainer:
    """Owns the generator, its optimizer, and the frozen surrogate.

    The surrogate's parameters never receive gradients or updates; only the
    generator is optimized.
    """

    def __init__(
        self,
        generator: PerturbationGenerator,
        surrogate: Classifier,
        targets: TargetClassSet,
        conditions: list[TextCondition],
        cfg: TrainConfig,
        mask: MaskSettings | None = None,
        metrics_log: MetricsLog | None = None,
    ):
        if len(conditions) != len(targets):
            raise ArgumentError("need exactly one condition per target class")
        if max(targets.indices) >= surrogate.num_classes:
            raise MappingError(f"target indices exceed surrogate '{surrogate.name}' label space")
        self.generator = generator.train()
        self.surrogate = surrogate.freeze()
        self.targets = targets
        self.cfg = cfg
        self.mask = mask
        self.metrics_log = metrics_log
        dtype = next(generator.parameters()).dtype
        self.embeddings = stack_embeddings(conditions).to(dtype)
        self.label_index = torch.tensor(targets.indices, dtype=torch.long)
        self.optimizer = torch.optim.Adam(
            generator.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=0.0
        )
        self.step_count = 0
        self._augment_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "augment"))
        self._mask_rng = torch.Generator().manual_seed(mask.seed if mask else 0)

    def _perturb(self, pixels: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        delta = self.generator(pixels, e_t, self.cfg.epsilon)
        if self.cfg.debug_checks and delta.detach().abs().max() > self.cfg.epsilon + 1e-7:
            raise TrainingError(self.step_count, "perturbation left the l-inf ball")
        if self.mask is not None:
            keep = patch_mask(
                delta.shape, self.mask.patch_size, self.mask.ratio, self._mask_rng, delta.device, delta.dtype
            )
            delta = delta * keep
        return delta

    def _branch_loss(
        self, pixels: torch.Tensor, e_t: torch.Tensor, labels: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        x_adv = clamp_valid(pixels + self._perturb(pixels, e_t))
        logits = self.surrogate(x_adv)
        return targeted_loss(logits, labels), logits

    def train_step(self, x_s: ImageBatch, targets: torch.Tensor, epoch: int = 0) -> StepMetrics:
        """One optimizer step on a batch with per-image target positions.

        Args:
            x_s: Source images.
            targets: Positions into the target class set, one per image.
            epoch: Epoch index recorded in the metrics.

        Raises:
            TrainingError: The loss became non-finite.
        """
        self.step_count += 1
        dtype = self.embeddings.dtype
        pixels = x_s.pixels.to(dtype)
        e_t = self.embeddings[targets]
        labels = self.label_index[targets]

        loss, logits = self._branch_loss(pixels, e_t, labels)
        if self.cfg.use_augmented_branch:
            aug_seed = int(torch.randint(0, 2**31 - 1, (), generator=self._augment_rng))
            x_aug = augment(x_s, aug_seed, self.cfg.flip_prob, (self.cfg.scale_min, 1.0))
            loss_aug, _ = self._branch_loss(x_aug.pixels.to(dtype), e_t, labels)
            loss = 0.5 * (loss + loss_aug)

        if not torch.isfinite(loss):
            raise TrainingError(self.step_count, f"non-finite loss {float(loss)}")

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        metrics = StepMetrics(
            step=self.step_count,
            epoch=epoch,
            loss=float(loss.detach()),
            hit_rate=float((logits.detach().argmax(1) == labels).float().mean()),
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        if self.metrics_log is not None:
            self.metrics_log.write(metrics)
        if self.step_count % self.cfg.log_every == 0:
            logger.log_step(metrics.step, metrics.loss, metrics.hit_rate, epoch=epoch)
        return metrics


def _run_epochs(
    trainer: Trainer,
    dataset: ImageDataset,
    epochs: int,
    batch_size: int,
    seed: int,
    max_steps: int | None,
    sample_targets: bool,
    on_epoch_end: Any = None,
    num_workers: int = 0,
) -> list[StepMetrics]:
    if len(dataset) == 0:
        raise ArgumentError("dataset is empty")
    target_rng = torch.Generator().manual_seed(derive_seed(seed, "targets"))
    history: list[StepMetrics] = []
    for epoch in range(epochs):
        loader = make_loader(dataset, batch_size, derive_seed(seed, f"data:{epoch}"), num_workers=num_workers)
        for pixels, _, indices in loader:
            batch = ImageBatch(pixels, tuple(dataset.image_id(int(i)) for i in indices), dataset.domain_tag)
            if sample_targets:
                targets = torch.randint(len(trainer.targets), (len(batch),), generator=target_rng)
            else:
                targets = torch.zeros(len(batch), dtype=torch.long)
            history.append(trainer.train_step(batch, targets, epoch))
            if max_steps is not None and trainer.step_count >= max_steps:
                break
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        if max_steps is not None and trainer.step_count >= max_steps:
            break
    return history


def train(
    dataset: ImageDataset,
    surrogate: Classifier,
    cfg: TrainConfig,
    generator_config: GeneratorConfig | None = None,
    encoder: TextEncoder | None = None,
    prompt_template: str = DEFAULT_TEMPLATE,
    text_encoder: str = "stub",
    encoder_seed: int = 0,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    num_workers: int = 0,
) -> Checkpoint:
    """Train a multi-target generator and return its final checkpoint.

    Targets are drawn uniformly per image from the target class set. When
    ``checkpoint_path`` is given, the checkpoint is rewritten atomically after
    every epoch, so an interrupted run keeps its last completed epoch.
    """
    deterministic_mode(cfg.deterministic or deterministic_requested())
    started = time.perf_counter()
    targets = TargetClassSet.resolve(cfg.target_classes, surrogate.label_names)
    gen_cfg = (generator_config or GeneratorConfig()).model_copy(update={"epsilon": cfg.epsilon})
    generator = build_generator(gen_cfg, derive_seed(cfg.seed, "init"))
    conditions = build_conditions(targets.names, gen_cfg.condition_mode, encoder, prompt_template)
    trainer = Trainer(
        generator,
        surrogate,
        targets,
        conditions,
        cfg,
        metrics_log=MetricsLog(metrics_path) if metrics_path else None,
    )
    logger.info(
        "training generator",
        targets=len(targets),
        images=len(dataset),
        epochs=cfg.epochs,
        variant=gen_cfg.variant,
    )

    def snapshot() -> Checkpoint:
        return Checkpoint.from_generator(
            generator,
            train_config=cfg.model_dump(mode="json"),
            target_classes=targets,
            prompt_template=prompt_template,
            text_encoder=text_encoder,
            encoder_seed=encoder_seed,
            seed=cfg.seed,
            surrogate_name=surrogate.name,
        )

    def on_epoch_end(epoch: int) -> None:
        if checkpoint_path is not None:
            save_checkpoint(snapshot(), checkpoint_path)
            logger.info(f"epoch {epoch + 1} checkpoint written", path=str(checkpoint_path))

    _run_epochs(
        trainer,
        dataset,
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
        cfg.max_steps,
        sample_targets=True,
        on_epoch_end=on_epoch_end,
        num_workers=num_workers,
    )
    generator.eval()
    logger.log_performance("training", time.perf_counter() - started)
    return snapshot()


def masked_finetune(
    ckpt: Checkpoint,
    target_class: str,
    ft: FinetuneConfig,
    dataset: ImageDataset,
    surrogate: Classifier,
    encoder: TextEncoder | None = None,
    metrics_path: str | Path | None = None,
) -> Checkpoint:
    """Fine-tune a checkpoint on one fixed class prompt with patch-masked deltas.

    Raises:
        ArgumentError: ``target_class`` is neither a checkpoint target nor a
            surrogate label.
    """
    targets = ckpt.target_classes
    mode = ckpt.generator_config.condition_mode
    if target_class in targets.names:
        position = targets.position(target_class)
        label = targets.indices[position]
    elif target_class in surrogate.label_names and mode == "text":
        label = surrogate.label_names.index(target_class)
        targets = TargetClassSet(targets.names + (target_class,), targets.indices + (label,))
        position = len(targets) - 1
    else:
        raise ArgumentError(
            f"unknown class '{target_class}'; available: {', '.join(ckpt.target_classes.names)}"
        )

    if mode == "one_hot":
        condition = one_hot_condition(target_class, position, len(targets), ckpt.prompt_template)
    else:
        condition = build_conditions([target_class], "text", encoder, ckpt.prompt_template)[0]

    base_cfg = TrainConfig.model_validate(ckpt.train_config)
    cfg = base_cfg.model_copy(
        update={
            "epochs": ft.epochs,
            "learning_rate": ft.learning_rate,
            "batch_size": ft.batch_size or base_cfg.batch_size,
            "seed": ft.seed,
            "target_classes": [target_class],
            "max_steps": ft.max_steps,
        }
    )
    mask = (
        MaskSettings(ft.patch_size, ft.mask_ratio, derive_seed(ft.seed, "mask"))
        if ft.mask_ratio > 0
        else None
    )
    generator = ckpt.build_generator()
    trainer = Trainer(
        generator,
        surrogate,
        TargetClassSet((target_class,), (label,)),
        [condition],
        cfg,
        mask=mask,
        metrics_log=MetricsLog(metrics_path) if metrics_path else None,
    )
    logger.info(
        "masked fine-tuning",
        target=target_class,
        mask_ratio=ft.mask_ratio,
        patch_size=ft.patch_size,
        epochs=ft.epochs,
    )
    _run_epochs(trainer, dataset, ft.epochs, cfg.batch_size, ft.seed, ft.max_steps, sample_targets=False)
    generator.eval()

    return Checkpoint.from_generator(
        generator,
        train_config=ckpt.train_config,
        target_classes=targets,
        prompt_template=ckpt.prompt_template,
        text_encoder=ckpt.text_encoder,
        encoder_seed=ckpt.encoder_seed,
        seed=ckpt.seed,
        surrogate_name=ckpt.surrogate_name,
        finetune={
            "class_name": target_class,
            "mask_ratio": ft.mask_ratio,
            "patch_size": ft.patch_size,
            "epochs": ft.epochs,
            "learning_rate": ft.learning_rate,
            "seed": ft.seed,
            "mode": "masked" if ft.mask_ratio > 0 else "plain",
        },
    )
