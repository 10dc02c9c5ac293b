"""Main CLI entry point for promptpert.

Subcommands train a text-conditioned perturbation generator, fine-tune it for
one class, attack images, evaluate transfer against victim classifiers, and
render reports and visualizations. Exit codes: 0 success, 1 runtime failure,
2 configuration or argument error.
"""

import time
from pathlib import Path

import click
import torch
from rich.panel import Panel

from .. import __version__
from ..core.checkpoint import load_checkpoint, save_checkpoint
from ..core.data import ImageBatch, open_dataset, read_image, resize, write_image
from ..core.evaluation import AttackReport, evaluate, perturbation_panel, visualize
from ..core.generator import generate, make_adversarial
from ..core.training import masked_finetune, train
from ..utils.config import deterministic_mode, deterministic_requested, load_environment
from ..utils.exceptions import ArgumentError, ConfigError, DataLoadError, PromptPertError
from ..utils.logging import setup_logging
from .config import RunConfig, load_run_config
from .utils import (
    console,
    handle_errors,
    load_classifier_spec,
    print_report,
    resolve_encoder,
    slug,
    summary_table,
    write_snapshot,
)

CHECKPOINT_NAME = "checkpoint.zip"


def _prepare(config: Path | None, overrides: dict) -> RunConfig:
    cfg = load_run_config(config, overrides)
    setup_logging(cfg.logging.model_dump(mode="json"))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _load_images(paths: tuple[str, ...], channels: int) -> ImageBatch:
    """Decode images at the first image's resolution."""
    if not paths:
        raise ArgumentError("no images given")
    images = []
    for path in paths:
        try:
            pixels = read_image(path)
        except DataLoadError as exc:
            raise PromptPertError(f"cannot decode image '{path}': {exc}") from exc
        if channels == 1:
            pixels = pixels.mean(0, keepdim=True)
        images.append(pixels)
    size = tuple(images[0].shape[-2:])
    stacked = torch.stack([resize(p.unsqueeze(0), size)[0] for p in images])
    return ImageBatch(stacked, tuple(Path(p).stem for p in paths), "files")


@click.group()
@click.version_option(__version__, prog_name="promptpert")
def cli() -> None:
    """Text-conditioned targeted adversarial perturbations.

    Trains one generator that serves many target classes through a text
    prompt, and measures how its perturbations transfer to unseen models.
    """
    load_environment()


@cli.command(name="train")
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=None, help="Root seed (overrides config).")
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--epochs", type=int, default=None, help="Override train.epochs.")
@click.option("--max-steps", type=int, default=None, help="Cap on optimizer steps.")
@click.option("--deterministic", is_flag=True, help="Deterministic single-threaded kernels.")
@handle_errors
def train_cmd(
    config: Path,
    seed: int | None,
    output_dir: Path | None,
    epochs: int | None,
    max_steps: int | None,
    deterministic: bool,
) -> None:
    """Train a multi-target generator from a JSON config.

    Examples:
      promptpert train configs/toy.json
      promptpert train configs/toy.json --seed 7 --deterministic
    """
    overrides = {
        "seed": seed,
        "train.seed": seed,
        "output_dir": str(output_dir) if output_dir else None,
        "train.epochs": epochs,
        "train.max_steps": max_steps,
        "train.deterministic": True if deterministic else None,
    }
    cfg = _prepare(config, overrides)
    section = cfg.require_train()
    deterministic_mode(section.deterministic or deterministic_requested())

    started = time.perf_counter()
    dataset = open_dataset(cfg.data.train)
    surrogate = load_classifier_spec(section.surrogate, dataset, cfg.output_dir, "surrogate")
    encoder = resolve_encoder(
        cfg.conditioning.text_encoder,
        cfg.conditioning.encoder_seed,
        cfg.generator.condition_mode,
    )
    metrics_path = cfg.output_dir / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    checkpoint_path = cfg.output_dir / CHECKPOINT_NAME
    write_snapshot(cfg, cfg.output_dir, "train")

    ckpt = train(
        dataset,
        surrogate,
        cfg.train_config(),
        generator_config=cfg.generator_config(),
        encoder=encoder,
        prompt_template=cfg.conditioning.prompt_template,
        text_encoder=cfg.conditioning.text_encoder,
        encoder_seed=cfg.conditioning.encoder_seed,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        num_workers=section.num_workers,
    )
    save_checkpoint(ckpt, checkpoint_path)
    console.print(
        summary_table(
            "Training finished",
            {
                "checkpoint": checkpoint_path,
                "sha256": ckpt.digest(),
                "targets": len(ckpt.target_classes),
                "surrogate": surrogate.name,
                "seconds": f"{time.perf_counter() - started:.1f}",
            },
        )
    )


@cli.command(name="finetune")
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--class", "class_name", required=True, help="Target class to specialize on.")
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--mask-ratio", type=float, default=None, help="Fraction of patches zeroed.")
@click.option("--patch-size", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), default=None)
@handle_errors
def finetune_cmd(
    config: Path,
    class_name: str,
    checkpoint: Path | None,
    mask_ratio: float | None,
    patch_size: int | None,
    epochs: int | None,
    output: Path | None,
) -> None:
    """Masked fine-tuning of a trained checkpoint on one class.

    Examples:
      promptpert finetune configs/toy.json --class "red circle"
      promptpert finetune configs/toy.json --class "red circle" --mask-ratio 0
    """
    overrides = {
        "finetune.mask_ratio": mask_ratio,
        "finetune.patch_size": patch_size,
        "finetune.epochs": epochs,
    }
    cfg = _prepare(config, overrides)
    section = cfg.require_train()
    deterministic_mode(section.deterministic or deterministic_requested())

    base = load_checkpoint(checkpoint or cfg.output_dir / CHECKPOINT_NAME)
    dataset = open_dataset(cfg.data.train)
    surrogate = load_classifier_spec(section.surrogate, dataset, cfg.output_dir, "surrogate")
    encoder = resolve_encoder(
        base.text_encoder, base.encoder_seed, base.generator_config.condition_mode
    )
    target = output or cfg.output_dir / f"checkpoint-{slug(class_name)}.zip"
    metrics_path = cfg.output_dir / f"metrics-{slug(class_name)}.jsonl"
    metrics_path.unlink(missing_ok=True)
    write_snapshot(cfg, cfg.output_dir, "finetune")

    ckpt = masked_finetune(
        base,
        class_name,
        cfg.finetune,
        dataset,
        surrogate,
        encoder=encoder,
        metrics_path=metrics_path,
    )
    save_checkpoint(ckpt, target)
    console.print(
        summary_table(
            "Fine-tuning finished",
            {
                "checkpoint": target,
                "class": class_name,
                "mode": ckpt.finetune["mode"],
                "mask_ratio": cfg.finetune.mask_ratio,
                "patch_size": cfg.finetune.patch_size,
                "epochs": cfg.finetune.epochs,
            },
        )
    )


@cli.command(name="attack")
@click.argument("checkpoint", type=click.Path(dir_okay=False, path_type=Path))
@click.argument("images", nargs=-1, required=True)
@click.option("--target", required=True, help="Target class name.")
@click.option("--epsilon", type=float, default=None, help="l-inf budget (default: checkpoint).")
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=Path("adversarial"))
@handle_errors
def attack_cmd(
    checkpoint: Path,
    images: tuple[str, ...],
    target: str,
    epsilon: float | None,
    output_dir: Path,
) -> None:
    """Perturb images toward a target class (no classifier is queried).

    Examples:
      promptpert attack runs/toy/checkpoint.zip cat.png --target "red circle"
    """
    if epsilon is not None and not 0 <= epsilon <= 1:
        raise ArgumentError(f"--epsilon must be in [0, 1], got {epsilon}")
    ckpt = load_checkpoint(checkpoint)
    position = ckpt.target_classes.position(target)
    encoder = resolve_encoder(
        ckpt.text_encoder, ckpt.encoder_seed, ckpt.generator_config.condition_mode
    )
    condition = ckpt.conditions(encoder)[position]
    generator = ckpt.build_generator()

    rows = {}
    for path in images:
        batch = _load_images((path,), ckpt.generator_config.in_channels)
        with torch.no_grad():
            perturbation = generate(batch, condition, epsilon, generator)
        x_adv = make_adversarial(batch, perturbation)
        stem = f"{batch.ids[0]}-{slug(target)}"
        write_image(x_adv.pixels[0], output_dir / f"{stem}-adv.png")
        write_image(perturbation_panel(perturbation)[0], output_dir / f"{stem}-delta.png")
        rows[path] = f"max|delta| = {perturbation.max_abs():.6f} (eps {perturbation.epsilon:.6f})"

    console.print(summary_table(f"Targeted perturbations toward '{target}'", rows))
    console.print(
        Panel(
            "Perturbations came from a single generator pass; no classifier was queried.",
            border_style="blue",
        )
    )


@cli.command(name="evaluate")
@click.argument("checkpoint", type=click.Path(dir_okay=False, path_type=Path))
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--epsilon", type=float, default=None, help="Budget override for a sweep.")
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--n-jobs", type=int, default=None, help="Parallel evaluation threads.")
@handle_errors
def evaluate_cmd(
    checkpoint: Path,
    config: Path,
    epsilon: float | None,
    output_dir: Path | None,
    n_jobs: int | None,
) -> None:
    """Measure targeted transfer ASR against the configured victims.

    Examples:
      promptpert evaluate runs/toy/checkpoint.zip configs/toy.json
      promptpert evaluate runs/toy/checkpoint.zip configs/toy.json --epsilon 0.0314
    """
    overrides = {
        "eval.epsilon": epsilon,
        "output_dir": str(output_dir) if output_dir else None,
        "eval.n_jobs": n_jobs,
    }
    cfg = _prepare(config, overrides)
    if not cfg.eval.victims:
        raise ConfigError("invalid configuration", ["eval.victims: at least one victim is required"])

    ckpt = load_checkpoint(checkpoint)
    train_set = open_dataset(cfg.data.train)
    victims = [
        load_classifier_spec(spec, train_set, cfg.output_dir, "victim") for spec in cfg.eval.victims
    ]
    encoder = resolve_encoder(
        ckpt.text_encoder, ckpt.encoder_seed, ckpt.generator_config.condition_mode
    )
    write_snapshot(cfg, cfg.output_dir, "evaluate")

    report = evaluate(
        ckpt,
        victims,
        open_dataset(cfg.data.eval_spec()),
        encoder=encoder,
        targets=cfg.eval.targets,
        defenses=cfg.eval.defenses,
        epsilon=cfg.eval.epsilon,
        batch_size=cfg.eval.batch_size,
        n_jobs=cfg.eval.n_jobs,
    )
    report.to_json(cfg.output_dir / "report.json")
    report.to_csv(cfg.output_dir / "report.csv")
    print_report(report)
    console.print(f"[green]✅ Report written to {cfg.output_dir}[/green]")


@cli.command(name="report")
@click.argument("report_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@handle_errors
def report_cmd(report_path: Path, csv_path: Path | None) -> None:
    """Re-render a saved report.json (optionally exporting CSV)."""
    report = AttackReport.read_json(report_path)
    print_report(report)
    if csv_path is not None:
        report.to_csv(csv_path)
        console.print(f"[green]✅ CSV written to {csv_path}[/green]")


@cli.command(name="visualize")
@click.argument("checkpoint", type=click.Path(dir_okay=False, path_type=Path))
@click.argument("images", nargs=-1, required=True)
@click.option("--target", required=True, help="Target class name.")
@click.option("--epsilon", type=float, default=None)
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), default=Path("grid.png"))
@handle_errors
def visualize_cmd(
    checkpoint: Path,
    images: tuple[str, ...],
    target: str,
    epsilon: float | None,
    output: Path,
) -> None:
    """Write a [perturbation | adversarial] grid, one row per image."""
    ckpt = load_checkpoint(checkpoint)
    position = ckpt.target_classes.position(target)
    encoder = resolve_encoder(
        ckpt.text_encoder, ckpt.encoder_seed, ckpt.generator_config.condition_mode
    )
    batch = _load_images(images, ckpt.generator_config.in_channels)
    with torch.no_grad():
        perturbation = generate(
            batch, ckpt.conditions(encoder)[position], epsilon, ckpt.build_generator()
        )
    visualize(perturbation, batch, output)
    console.print(f"[green]✅ Grid written to {output}[/green]")


def main() -> None:
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
