"""promptpert: text-conditioned targeted adversarial perturbation generators.

One generator serves many target classes: a text prompt naming the class is
embedded, purified and fused into the image encoder, and injected again into
the decoder through cross-attention. The output is a bounded l-inf
perturbation that transfers to classifiers the generator never saw.
"""

__version__ = "0.1.0"
__author__ = "promptpert contributors"
__license__ = "MIT"

from .core.checkpoint import Checkpoint, TargetClassSet, load_checkpoint, save_checkpoint
from .core.conditioning import TextCondition, get_text_encoder
from .core.data import DatasetSpec, ImageBatch, load_image_batch, open_dataset
from .core.defenses import DefenseSpec, apply_defense
from .core.evaluation import AttackReport, attack_success_rate, build_variant, evaluate, visualize
from .core.generator import GeneratorConfig, PerturbationBatch, build_generator, generate
from .core.models import BlackBoxVictim, Classifier, fit_classifier
from .core.training import FinetuneConfig, TrainConfig, masked_finetune, train

__all__ = [
    "AttackReport",
    "BlackBoxVictim",
    "Checkpoint",
    "Classifier",
    "DatasetSpec",
    "DefenseSpec",
    "FinetuneConfig",
    "GeneratorConfig",
    "ImageBatch",
    "PerturbationBatch",
    "TargetClassSet",
    "TextCondition",
    "TrainConfig",
    "apply_defense",
    "attack_success_rate",
    "build_generator",
    "build_variant",
    "evaluate",
    "fit_classifier",
    "generate",
    "get_text_encoder",
    "load_checkpoint",
    "load_image_batch",
    "masked_finetune",
    "open_dataset",
    "save_checkpoint",
    "train",
    "visualize",
]
