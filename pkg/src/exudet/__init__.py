"""exudet: a from-scratch CNN pipeline for exudate detection in fundus images.

Everything trains and runs on numpy alone: explicit forward/backward layers,
SGD with momentum, a domain-specific augmentation recipe, stratified data
handling, and a CLI tying the pieces together.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DegenerateBatchError,
    ExudetError,
    FormatError,
    ShapeError,
    StateError,
    TrainingError,
)
from .metrics import ConfusionMatrix, MetricsReport, confusion, report
from .model import ModelSpec, build_model, count_parameters, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, fit, grad_check, sweep_dropout

__all__ = [
    "ConfigError",
    "ConfusionMatrix",
    "DataError",
    "DegenerateBatchError",
    "ExudetError",
    "FormatError",
    "MetricsReport",
    "ModelSpec",
    "ShapeError",
    "StateError",
    "TrainConfig",
    "TrainingError",
    "build_model",
    "confusion",
    "count_parameters",
    "evaluate",
    "fit",
    "grad_check",
    "load_checkpoint",
    "report",
    "save_checkpoint",
    "sweep_dropout",
    "__version__",
]
