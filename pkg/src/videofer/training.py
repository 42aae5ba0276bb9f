"""Masked many-to-many loss, multi-step schedule, the epoch loop and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import random
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .core import INVALID_CODE, ConfigError, FERError, FrameReadError, require_odd_window
from .dataio import FrameStore, VideoAnnotation, WindowSpec, index_training_windows
from .models import ExpressionModel, config_fingerprint, save_weights, read_weights

log = logging.getLogger(__name__)

DEFAULT_BATCH = {"static": 128, "gru": 32, "transformer": 32}


class NoValidTargetError(FERError, ValueError):
    """Raised when a batch has no frame with a valid label."""


class FingerprintError(FERError, RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    epochs: int = 10
    milestones: Tuple[int, ...] = (2, 4, 8)
    lr_gamma: float = 0.1
    batch_size: Optional[int] = None
    seed: int = 0
    window_T: int = 9
    stride: int = 9
    optimizer: str = "sgd"
    momentum: float = 0.9

    def validate(self) -> None:
        require_odd_window(self.window_T, "window_T")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 0 or ms[-1] >= self.epochs):
            raise ConfigError(f"milestones must lie in [0, epochs), got {ms}")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigError(f"lr_gamma must lie in (0, 1], got {self.lr_gamma}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be positive")
        if self.optimizer != "sgd":
            raise ConfigError(f"only the sgd optimizer is supported, got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")

    def batch_for(self, kind: str) -> int:
        return self.batch_size or DEFAULT_BATCH[kind]


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean NLL over frames whose label is not -1.

    logits: (B, T, C); labels: (B, T) integer codes.
    """
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    valid = labels != INVALID_CODE
    if not bool(valid.any()):
        raise NoValidTargetError("batch contains no frame with a valid label")
    return F.cross_entropy(logits[valid], labels[valid])


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for m in config.milestones if m <= epoch)
    # Decimal arithmetic on the shortest reprs, rounded once, so 5e-4 * 0.1**2 is exactly 5e-06.
    return float(Decimal(repr(config.base_lr)) * Decimal(repr(config.lr_gamma)) ** passed)


def set_deterministic(seed: int, enabled: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum)


def training_windows(videos: Sequence[VideoAnnotation], kind: str, config: TrainConfig) -> List[Tuple[VideoAnnotation, WindowSpec]]:
    """Static models see single valid frames; temporal models see T-frame windows."""
    out = []
    for ann in videos:
        if kind == "static":
            specs = index_training_windows(ann, 1, 1)
        else:
            specs = index_training_windows(ann, config.window_T, config.stride)
        out.extend((ann, s) for s in specs)
    return out


def _load_batch(store: FrameStore, items) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    frames, labels = [], []
    for ann, spec in items:
        try:
            s = store.sample(ann, spec)
        except FrameReadError as exc:
            log.warning("skipping window %s@%d: %s", spec.video_id, spec.frame_indices[0], exc)
            continue
        frames.append(s.frames)
        labels.append(s.labels)
    if not frames:
        return None, None
    return torch.from_numpy(np.stack(frames)), torch.from_numpy(np.stack(labels))


@dataclass
class Checkpoint:
    params: dict
    optimizer_state: Optional[dict]
    epoch: int
    train_config: TrainConfig
    fingerprint: str
    metrics: dict = field(default_factory=dict)


def bundle_fingerprint(model: ExpressionModel, config: TrainConfig) -> str:
    return config_fingerprint(model.backbone_cfg, model.head_cfg, config)


def save_checkpoint(model: ExpressionModel, path: str | Path, config: TrainConfig,
                    optimizer: Optional[torch.optim.Optimizer] = None, epoch: int = 0,
                    metrics: Optional[dict] = None) -> None:
    """``epoch`` is the number of completed epochs, i.e. where a resume starts."""
    save_weights(model, path, extra={
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "train_config": asdict(config),
        "train_fingerprint": bundle_fingerprint(model, config),
        "metrics": dict(metrics or {}),
    })


def load_checkpoint(path: str | Path, model: Optional[ExpressionModel] = None,
                    config: Optional[TrainConfig] = None, allow_mismatch: bool = False) -> Checkpoint:
    """Read a checkpoint, refusing it when it was written for a different configuration.

    When ``model`` and ``config`` are given, their combined fingerprint must match
    the stored one unless ``allow_mismatch`` is set.
    """
    blob = read_weights(path)
    if "train_fingerprint" not in blob:
        raise FingerprintError(f"{path}: weight file carries no training state")
    tc = blob["train_config"]
    tc["milestones"] = tuple(tc["milestones"])
    ckpt = Checkpoint(blob["params"], blob.get("optimizer"), int(blob["epoch"]), TrainConfig(**tc),
                      blob["train_fingerprint"], blob.get("metrics") or {})
    if model is not None and config is not None:
        expected = bundle_fingerprint(model, config)
        if expected != ckpt.fingerprint:
            if not allow_mismatch:
                raise FingerprintError(
                    f"{path}: checkpoint fingerprint {ckpt.fingerprint} does not match the current configuration ({expected})"
                )
            log.warning("resuming despite fingerprint mismatch (%s vs %s)", ckpt.fingerprint, expected)
    return ckpt


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    seconds: float
    val_macro_f1: Optional[float] = None
    val_total_accuracy: Optional[float] = None
    val_e_total: Optional[float] = None


@dataclass
class FitResult:
    model: ExpressionModel
    history: List[EpochRecord]
    best_score: Optional[float] = None


def fit(
    model: ExpressionModel,
    train_videos: Sequence[VideoAnnotation],
    store: FrameStore,
    config: TrainConfig,
    val_videos: Optional[Sequence[VideoAnnotation]] = None,
    out_dir: str | Path | None = None,
    resume: Optional[Checkpoint] = None,
    deterministic: bool = False,
) -> FitResult:
    """Train ``model`` in place.

    Shuffling and dropout are reseeded from (seed, epoch) at each epoch start, so a
    resumed run replays exactly what an uninterrupted one would. When ``out_dir``
    is given, ``last.pt``, ``best.pt`` and an append-only ``train_log.jsonl`` go there.
    """
    from .inference import evaluate_model  # local import: inference depends on models only

    config.validate()
    kind = model.kind
    items = training_windows(train_videos, kind, config)
    if not items:
        raise ValueError("training set yields no windows with a valid label")
    if deterministic:
        set_deterministic(config.seed)

    optimizer = make_optimizer(model, config)
    start_epoch = 0
    best = None
    if resume is not None:
        model.load_state_dict(resume.params)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch
        best = resume.metrics.get("best_score")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    batch_size = config.batch_for(kind)
    history: List[EpochRecord] = []

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
        torch.manual_seed(config.seed * 1000 + epoch)

        model.train()
        total, count = 0.0, 0
        for b in range(0, len(order), batch_size):
            frames, labels = _load_batch(store, [items[i] for i in order[b:b + batch_size]])
            if frames is None:
                continue
            loss = masked_cross_entropy(model(frames), labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            n = int((labels != INVALID_CODE).sum())
            total += loss.item() * n
            count += n
        rec = EpochRecord(epoch, lr, total / max(count, 1), 0.0)

        if val_videos:
            report = evaluate_model(model, val_videos, store, config.window_T)
            rec.val_macro_f1, rec.val_total_accuracy, rec.val_e_total = (
                report.macro_f1, report.total_accuracy, report.e_total)
        rec.seconds = time.perf_counter() - t0
        history.append(rec)
        log.info("%s epoch %d lr %.3g loss %.4f%s", kind, epoch, lr, rec.train_loss,
                 "" if rec.val_e_total is None else f" val E_total {rec.val_e_total:.4f}")

        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
            score = rec.val_e_total if rec.val_e_total is not None else -rec.train_loss
            improved = best is None or score > best
            if improved:
                best = score
            snapshot = {**asdict(rec), "best_score": best}
            save_checkpoint(model, out / "last.pt", config, optimizer, epoch + 1, snapshot)
            if improved:
                save_checkpoint(model, out / "best.pt", config, optimizer, epoch + 1, snapshot)

    return FitResult(model, history, best)
