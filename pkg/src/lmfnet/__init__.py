"""Lightweight multi-scale feature layers and a saliency network on plain numpy."""

from .analysis import analyze_network, flops_count, gridding_check, param_count, receptive_field
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .errors import (
    BadMagicError,
    CheckpointMismatchError,
    ConfigError,
    DatasetError,
    HeaderError,
    LabelRangeError,
    LMFError,
    MaxvalError,
    NumericalError,
    ParseError,
    RecordLengthError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .lmf import LMFConfig, LMFLayer, lmf_param_count
from .losses import hybrid_loss
from .metrics import evaluate_dataset, evaluate_pairs
from .network import (
    NetworkConfig,
    StageSpec,
    build_classifier,
    build_network,
    build_sod_network,
    default_classifier_config,
    default_sod_config,
    load_config,
    packaged_config,
)
from .training import Recipe, ScheduleSpec, packaged_recipe, predict, train_classifier, train_sod

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "CheckpointMismatchError",
    "ConfigError",
    "DatasetError",
    "HeaderError",
    "LMFConfig",
    "LMFError",
    "LMFLayer",
    "LabelRangeError",
    "MaxvalError",
    "NetworkConfig",
    "NumericalError",
    "ParseError",
    "Recipe",
    "RecordLengthError",
    "ScheduleSpec",
    "ShapeError",
    "StageSpec",
    "TruncatedError",
    "VersionError",
    "analyze_network",
    "build_classifier",
    "build_network",
    "build_sod_network",
    "default_classifier_config",
    "default_sod_config",
    "evaluate_dataset",
    "evaluate_pairs",
    "flops_count",
    "gridding_check",
    "hybrid_loss",
    "lmf_param_count",
    "load_checkpoint",
    "load_config",
    "load_into",
    "packaged_config",
    "packaged_recipe",
    "param_count",
    "predict",
    "receptive_field",
    "save_checkpoint",
    "train_classifier",
    "train_sod",
]
