"""Confusion matrix, per-class and macro F1, total accuracy and the combined score."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .core import INVALID_CODE, NUM_CLASSES, DEFAULT_CLASS_NAMES, FERError, InvalidInputError

F1_WEIGHT = 0.67
ACC_WEIGHT = 0.33


class MissingPredictionsError(FERError, LookupError):
    pass


def confusion_matrix(y_true: Iterable[int], y_pred: Iterable[int]) -> np.ndarray:
    """7x7 counts, rows = true class, columns = prediction. True labels of -1 are skipped."""
    t = np.asarray(list(y_true) if not isinstance(y_true, np.ndarray) else y_true, dtype=np.int64)
    p = np.asarray(list(y_pred) if not isinstance(y_pred, np.ndarray) else y_pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise InvalidInputError(f"y_true and y_pred must be equal-length 1-D sequences, got {t.shape} and {p.shape}")
    if ((p < 0) | (p >= NUM_CLASSES)).any():
        raise InvalidInputError("predictions must be class codes 0..6")
    if ((t < INVALID_CODE) | (t >= NUM_CLASSES)).any():
        raise InvalidInputError("true labels must be codes in -1..6")
    keep = t != INVALID_CODE
    flat = t[keep] * NUM_CLASSES + p[keep]
    return np.bincount(flat, minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES, NUM_CLASSES)


def _require_nonempty(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.shape != (NUM_CLASSES, NUM_CLASSES):
        raise InvalidInputError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}")
    if cm.sum() < 1:
        raise InvalidInputError("confusion matrix is empty")
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def per_class_scores(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class; any 0/0 is taken as 0."""
    cm = _require_nonempty(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of the 7 per-class F1 scores (absent classes count as 0)."""
    return float(per_class_scores(cm)[2].mean())


def total_accuracy(cm: np.ndarray) -> float:
    cm = _require_nonempty(cm)
    return float(np.trace(cm) / cm.sum())


def e_total(f1: float, acc: float) -> float:
    for name, v in (("f1", f1), ("acc", acc)):
        if not 0.0 <= v <= 1.0:
            raise InvalidInputError(f"{name}={v} outside [0, 1]")
    return F1_WEIGHT * f1 + ACC_WEIGHT * acc


@dataclass
class MetricReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    total_accuracy: float
    e_total: float

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "MetricReport":
        cm = _require_nonempty(cm)
        p, r, f = per_class_scores(cm)
        mf1 = float(f.mean())
        acc = total_accuracy(cm)
        return cls(cm, p, r, f, cm.sum(axis=1), mf1, acc, e_total(mf1, acc))

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "MetricReport":
        return cls.from_confusion(confusion_matrix(y_true, y_pred))

    def as_dict(self) -> Dict[str, float]:
        out: Dict[str, float] = {
            "macro_f1": self.macro_f1,
            "total_accuracy": self.total_accuracy,
            "e_total": self.e_total,
        }
        for k in range(NUM_CLASSES):
            out[f"f1_class_{k}"] = float(self.f1[k])
        for k in range(NUM_CLASSES):
            out[f"precision_class_{k}"] = float(self.precision[k])
            out[f"recall_class_{k}"] = float(self.recall[k])
            out[f"support_class_{k}"] = int(self.support[k])
        return out

    def to_text(self) -> str:
        return "".join(f"{k}: {v!r}\n" for k, v in self.as_dict().items())

    def render(self, names: Sequence[str] = DEFAULT_CLASS_NAMES) -> str:
        lines = [f"{'class':<12}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"]
        for k, name in enumerate(names):
            lines.append(f"{name:<12}{self.precision[k]:>10.4f}{self.recall[k]:>10.4f}"
                         f"{self.f1[k]:>10.4f}{int(self.support[k]):>10d}")
        lines.append("")
        lines.append(f"macro F1        {self.macro_f1:.4f}")
        lines.append(f"total accuracy  {self.total_accuracy:.4f}")
        lines.append(f"E_total         {self.e_total:.4f}")
        return "\n".join(lines)


def parse_report_text(text: str) -> Dict[str, float]:
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition(": ")
        out[key] = float(value)
    return out


def evaluate_files(pred_csv: str | Path, annotations: str | Path | Sequence) -> MetricReport:
    """Join a prediction CSV with ground truth on (video_id, frame) and score it.

    ``annotations`` is a split directory of ``<video_id>.txt`` files or an
    already-loaded list of VideoAnnotation.
    """
    from .dataio import load_annotation_file
    from .inference import read_predictions

    if isinstance(annotations, (str, Path)):
        anns = [load_annotation_file(p) for p in sorted(Path(annotations).glob("*.txt"))]
    else:
        anns = list(annotations)
    preds = {(r.video_id, r.frame_index): r.pred for r in read_predictions(pred_csv)}

    y_true: List[int] = []
    y_pred: List[int] = []
    missing: List[Tuple[str, int]] = []
    for ann in anns:
        for f, code in enumerate(ann.labels):
            if code == INVALID_CODE:
                continue
            p = preds.get((ann.video_id, f))
            if p is None:
                missing.append((ann.video_id, f))
                continue
            y_true.append(int(code))
            y_pred.append(p)
    if missing:
        shown = ", ".join(f"{v}:{f}" for v, f in missing[:10])
        raise MissingPredictionsError(f"{len(missing)} annotated frames have no prediction, e.g. {shown}")
    return MetricReport.from_labels(y_true, y_pred)
