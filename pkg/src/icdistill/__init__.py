"""In-context distillation for a small prior-fitted transformer classifier."""

from .autodiff import Tape, Tensor, backward
from .data import Dataset, SplitSpec, load_csv, split
from .distill import DistilledSet, IcdConfig, distill, random_context_baseline
from .meta import meta_train
from .metrics import accuracy, auc, f1, imbalance_ratio, trend_slope
from .model import PfnConfig, PfnModel, predict_proba
from .prior import PriorConfig, sample_task, sample_two_moons

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "Dataset",
    "SplitSpec",
    "load_csv",
    "split",
    "DistilledSet",
    "IcdConfig",
    "distill",
    "random_context_baseline",
    "meta_train",
    "accuracy",
    "auc",
    "f1",
    "imbalance_ratio",
    "trend_slope",
    "PfnConfig",
    "PfnModel",
    "predict_proba",
    "PriorConfig",
    "sample_task",
    "sample_two_moons",
]
