"""Semi-supervised adversarial domain adaptation for semantic segmentation,
self-contained on numpy: a small reverse-mode autodiff engine, a synthetic
two-domain benchmark, the four-network adversarial architecture, and the
alternating min-max trainer with confusion-matrix evaluation.
"""

from . import autodiff, config, data, losses, metrics, networks, training
from .config import ExperimentConfig, load_config
from .data import DatasetBundle, DomainSpec, SplitPlan, make_splits
from .networks import ModelConfig
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "config",
    "data",
    "losses",
    "metrics",
    "networks",
    "training",
    "ExperimentConfig",
    "load_config",
    "DatasetBundle",
    "DomainSpec",
    "SplitPlan",
    "make_splits",
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "train",
    "__version__",
]
