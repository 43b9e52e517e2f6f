"""Neural-network training with per-unit local losses and two contrastive
forward passes, the original forward-forward rule as its singleton-unit
special case, and a backpropagation baseline."""

__version__ = "0.1.0"

from .data import NoiseProfile, corrupt_dataset, load_idx_images, load_idx_labels
from .errors import (
    ArchParseError,
    ConfigError,
    DataError,
    IntFFError,
    NumericalOverflowError,
    ShapeError,
)
from .evaluate import EvalReport, evaluate, predict_label, predict_labels, train_readout
from .model import (
    ArchSpec,
    HiddenUnitSpec,
    IntFFModel,
    build_model,
    goodness_total,
    load_model,
    model_forward,
    p_positive,
    parse_arch,
    save_model,
    unit_forward,
)
from .training import (
    Adam,
    EarlyStopController,
    MetricsLog,
    TrainConfig,
    train,
    train_step_intff,
    unit_backward,
    unit_loss,
)

__all__ = [
    "__version__",
    "Adam",
    "ArchParseError",
    "ArchSpec",
    "ConfigError",
    "DataError",
    "EarlyStopController",
    "EvalReport",
    "HiddenUnitSpec",
    "IntFFError",
    "IntFFModel",
    "MetricsLog",
    "NoiseProfile",
    "NumericalOverflowError",
    "ShapeError",
    "TrainConfig",
    "build_model",
    "corrupt_dataset",
    "evaluate",
    "goodness_total",
    "load_idx_images",
    "load_idx_labels",
    "load_model",
    "model_forward",
    "p_positive",
    "parse_arch",
    "predict_label",
    "predict_labels",
    "save_model",
    "train",
    "train_readout",
    "train_step_intff",
    "unit_backward",
    "unit_forward",
    "unit_loss",
]
