"""Tabular model validation: fairness and compliance, robustness, uncertainty, drift and sensitivity
suites, plus multi-teacher distillation and Gaussian-copula synthesis."""

__version__ = "0.1.0"

from .dataset import (  # noqa: E402
    FeatureKind,
    PredictionSet,
    TabularFrame,
    TaskType,
    ValidationDataset,
    get_predictions,
    load_table,
    write_table,
)
from .oracle import ScoringOracle, load_model_spec, parse_model_spec  # noqa: E402

__all__ = [
    "__version__",
    "FeatureKind",
    "PredictionSet",
    "ScoringOracle",
    "TabularFrame",
    "TaskType",
    "ValidationDataset",
    "get_predictions",
    "load_model_spec",
    "load_table",
    "parse_model_spec",
    "write_table",
]
