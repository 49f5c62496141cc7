"""Semantic change detection toolkit.

A Siamese state-space encoder feeds a joint spatio-frequency fusion stage
and a change-guided dual-task decoder; losses and metrics implement the
separated-kappa family used by semantic change detection benchmarks.
"""

from .config import LossWeights, ModelConfig, OptimizerConfig, RunConfig, load_config, save_config
from .data import BiTemporalSample, ChangeDataset, DatasetSpec, augment, load_dataset, write_dataset
from .errors import ConfigError, DataError, NumericsError, ScdError, ShapeError
from .losses import total_loss
from .metrics import ConfusionMatrix, TransitionMatrix, accumulate_confusion, emit_report, transition_matrix
from .model import ChangeDetectionModel, ModelOutput, build_model, parameter_count
from .synth import SynthConfig, default_transition_table, generate
from .training import TrainResult, evaluate, load_checkpoint, predict, restore_model, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BiTemporalSample",
    "ChangeDataset",
    "ChangeDetectionModel",
    "ConfigError",
    "ConfusionMatrix",
    "DataError",
    "DatasetSpec",
    "LossWeights",
    "ModelConfig",
    "ModelOutput",
    "NumericsError",
    "OptimizerConfig",
    "RunConfig",
    "ScdError",
    "ShapeError",
    "SynthConfig",
    "TrainResult",
    "TransitionMatrix",
    "accumulate_confusion",
    "augment",
    "build_model",
    "default_transition_table",
    "emit_report",
    "evaluate",
    "generate",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "parameter_count",
    "predict",
    "restore_model",
    "save_checkpoint",
    "save_config",
    "total_loss",
    "train",
    "transition_matrix",
    "write_dataset",
    "__version__",
]
