"""Spatial-temporal ensemble for facial expression recognition in videos."""

from .core import (
    DEFAULT_LABEL_MAP,
    INVALID,
    NUM_CLASSES,
    ExpressionLabel,
    LabelMap,
    label_code,
    label_codec,
    softmax,
)
from .metrics import MetricReport, confusion_matrix, e_total, macro_f1, total_accuracy

__all__ = [
    "DEFAULT_LABEL_MAP",
    "INVALID",
    "NUM_CLASSES",
    "ExpressionLabel",
    "LabelMap",
    "MetricReport",
    "confusion_matrix",
    "e_total",
    "label_code",
    "label_codec",
    "macro_f1",
    "softmax",
    "total_accuracy",
]
__version__ = "0.1.0"
