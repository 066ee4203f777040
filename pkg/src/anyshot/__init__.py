"""Any-shot object detection with learnable class semantics and a rebalanced loss."""

from .alignment import AlignmentModel, score
from .config import ENV_PREFIX, ExperimentConfig, load_config
from .errors import (AnyShotError, ConfigError, DimensionError, DomainError, EmptyInput, MissingEmbedding,
                     ModeMismatch, NumericalError, TrainingDiverged, ZeroNormError)
from .evaluation import EvalReport, Thresholds, average_precision, evaluate, harmonic_mean, recall_at_k
from .loss import LossConfig, focal_loss, gradient_check, group_loss, loss_gradient, rebalanced_loss
from .semantics import SemanticMatrix, Vocabulary, transform_semantics
from .synthdata import SplitSpec, WorldSpec, assemble_bundle, generate_world
from .trainer import TrainConfig, fine_tune, train_base, zsd_self_tune

__version__ = "0.1.0"

__all__ = [
    "AlignmentModel", "AnyShotError", "ConfigError", "DimensionError", "DomainError", "ENV_PREFIX", "EmptyInput",
    "EvalReport", "ExperimentConfig", "LossConfig", "MissingEmbedding", "ModeMismatch", "NumericalError",
    "SemanticMatrix", "SplitSpec", "Thresholds", "TrainConfig", "TrainingDiverged", "Vocabulary", "WorldSpec",
    "ZeroNormError", "assemble_bundle", "average_precision", "evaluate", "fine_tune", "focal_loss",
    "generate_world", "gradient_check", "group_loss", "harmonic_mean", "load_config", "loss_gradient",
    "rebalanced_loss", "recall_at_k", "score", "train_base", "transform_semantics", "zsd_self_tune",
]
