"""Many-to-one prediction, weighted ensembling and the prediction CSV."""

from __future__ import annotations

import csv
import itertools
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import NUM_CLASSES, ConfigError, InvalidInputError, require_odd_window
from .dataio import FrameStore, VideoAnnotation, build_inference_windows
from .metrics import MetricReport

log = logging.getLogger(__name__)

ENSEMBLE_MODELS = ("static", "gru", "transformer")
ENSEMBLE_MODES = ("prob", "logit")
CSV_HEADER = ["video_id", "frame", "pred"] + [f"prob_{k}" for k in range(NUM_CLASSES)]
PROB_FORMAT = ".9g"


def middle_frame_index(T: int) -> int:
    return (require_odd_window(T) - 1) // 2


@dataclass
class EnsembleConfig:
    """Non-negative per-model weights (static, gru, transformer), rescaled to sum to 1.

    ``mode="prob"`` sums softmax outputs. ``mode="logit"`` sums per-model
    log-probabilities and renormalizes, which equals a weighted logit sum up to
    a per-model constant that softmax cancels.
    """

    weights: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    mode: str = "prob"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ConfigError("ensemble weights must be a non-empty list")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ConfigError(f"ensemble weights must be finite and non-negative, got {self.weights}")
        if w.sum() <= 0:
            raise ConfigError("at least one ensemble weight must be positive")
        if self.mode not in ENSEMBLE_MODES:
            raise ConfigError(f"ensemble mode must be one of {ENSEMBLE_MODES}, got {self.mode!r}")
        # Leave weights that already sum to 1 untouched so configs round-trip exactly.
        total = math.fsum(w)  # correctly rounded, so independent of model order
        if abs(total - 1.0) > 1e-12:
            w = w / total
        self.weights = tuple(float(x) for x in w)


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # Summing sorted terms makes the result independent of model order, bit for bit.
    return np.sort(terms, axis=0).sum(axis=0)


def ensemble_combine(probs: Sequence[np.ndarray] | np.ndarray, config: EnsembleConfig) -> np.ndarray:
    """Weighted sum over the leading (model) axis; trailing axes are kept.

    In ``prob`` mode every output lies between the smallest and largest input
    among positively weighted models; the final clip only removes rounding.
    """
    p = np.asarray(probs, dtype=np.float64)
    w = np.asarray(config.weights, dtype=np.float64)
    if p.shape[0] != len(w):
        raise ConfigError(f"{len(w)} ensemble weights for {p.shape[0]} models")
    if p.shape[-1] != NUM_CLASSES:
        raise InvalidInputError(f"expected {NUM_CLASSES}-way probabilities, got shape {p.shape}")
    wb = w.reshape((-1,) + (1,) * (p.ndim - 1))
    if config.mode == "prob":
        active = p[w > 0]
        return np.clip(_ordered_sum(wb * p), active.min(axis=0), active.max(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(p)
        # 0 * log 0 is taken as 0 so a zero-weight model cannot poison the sum.
        scaled = np.where(wb == 0, 0.0, logp * wb)
    z = _ordered_sum(scaled)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@torch.no_grad()
def predict_video(
    model,
    ann: VideoAnnotation,
    store: FrameStore,
    T: int = 9,
    batch_size: int = 1,
    return_logits: bool = False,
) -> np.ndarray:
    """Per-frame class probabilities (n_frames, 7) for one video.

    Temporal heads run one replicate-padded window per frame and keep only the
    middle position; the static head classifies each frame on its own.

    With ``batch_size=1`` each window goes through exactly the forward pass a
    standalone many-to-many call on that window would, so results match it
    bitwise. Larger batches are faster but CPU kernels may then differ in the
    last bits.
    """
    model.eval()
    n = len(ann)
    if n < 1:
        raise InvalidInputError(f"video {ann.video_id!r} has no frames")
    if model.kind == "static":
        specs = [(f,) for f in range(n)]
        mid = 0
    else:
        specs = [w.frame_indices for w in build_inference_windows(ann, T)]
        mid = middle_frame_index(T)

    out = []
    for b in range(0, n, batch_size):
        chunk = specs[b:b + batch_size]
        frames = np.stack([store.frames(ann.video_id, idx) for idx in chunk])
        logits = model(torch.from_numpy(frames))[:, mid]
        out.append(logits.double())
    logits = torch.cat(out)
    if return_logits:
        return logits.numpy()
    return logits.softmax(dim=-1).numpy()


@dataclass
class PredictionRecord:
    video_id: str
    frame_index: int
    probs: np.ndarray
    pred: int = -1
    model_probs: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.pred == -1:
            self.pred = int(np.argmax(self.probs))


def records_for_video(video_id: str, probs: np.ndarray) -> List[PredictionRecord]:
    return [PredictionRecord(video_id, f, p) for f, p in enumerate(probs)]


def write_predictions(records: Sequence[PredictionRecord], path: str | Path) -> None:
    keys = [(r.video_id, r.frame_index) for r in records]
    if any(b <= a for a, b in zip(keys, keys[1:])):
        raise ValueError("prediction records must be sorted by (video_id, frame) without duplicates")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.video_id, r.frame_index, r.pred] + [format(float(p), PROB_FORMAT) for p in r.probs])


def read_predictions(path: str | Path) -> List[PredictionRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            PredictionRecord(row[0], int(row[1]), np.array([float(x) for x in row[3:]]), int(row[2]))
            for row in reader
        ]


def predict_videos(model, videos: Sequence[VideoAnnotation], store: FrameStore, T: int = 9,
                   batch_size: int = 1) -> Dict[str, np.ndarray]:
    return {ann.video_id: predict_video(model, ann, store, T, batch_size) for ann in videos}


def evaluate_probs(videos: Sequence[VideoAnnotation], probs: Dict[str, np.ndarray]) -> MetricReport:
    y_true = np.concatenate([ann.labels for ann in videos])
    y_pred = np.concatenate([np.argmax(probs[ann.video_id], axis=-1) for ann in videos])
    return MetricReport.from_labels(y_true, y_pred)


def evaluate_model(model, videos: Sequence[VideoAnnotation], store: FrameStore, T: int = 9) -> MetricReport:
    was_training = model.training
    try:
        return evaluate_probs(videos, predict_videos(model, videos, store, T))
    finally:
        model.train(was_training)


def simplex_grid(num_models: int, step: float) -> List[Tuple[float, ...]]:
    """All weight vectors on the simplex with coordinates in multiples of ``step``."""
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise ConfigError(f"grid step {step} does not divide 1")
    out = []
    for combo in itertools.product(range(n + 1), repeat=num_models - 1):
        rest = n - sum(combo)
        if rest >= 0:
            out.append(tuple(c / n for c in combo) + (rest / n,))
    return out


def search_ensemble_weights(
    videos: Sequence[VideoAnnotation],
    model_probs: Sequence[Dict[str, np.ndarray]],
    step: float = 0.05,
    mode: str = "prob",
) -> Tuple[EnsembleConfig, MetricReport]:
    """Grid search over simplex weights, maximizing E_total on ``videos``.

    Vertices are part of the grid, so the result is never worse than the best
    single model. Ties keep the first grid point in enumeration order.
    """
    best: Optional[Tuple[float, EnsembleConfig, MetricReport]] = None
    for w in simplex_grid(len(model_probs), step):
        cfg = EnsembleConfig(w, mode)
        combined = {
            ann.video_id: ensemble_combine([mp[ann.video_id] for mp in model_probs], cfg) for ann in videos
        }
        report = evaluate_probs(videos, combined)
        if best is None or report.e_total > best[0]:
            best = (report.e_total, cfg, report)
    assert best is not None
    return best[1], best[2]
