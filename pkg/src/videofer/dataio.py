"""Annotation files, frame loading, window indexing and the synthetic dataset.

On-disk layout::

    <annotations_root>/<split>/<video_id>.txt   one integer label per line, frame order
    <frames_root>/<video_id>/<index:05d>.jpg    pre-cropped face frames
    <annotations_root>/manifest.csv              split,video_id,frames,valid
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import (
    FRAME_SIZE,
    INVALID_CODE,
    NUM_CLASSES,
    ConfigError,
    FrameReadError,
    ParseError,
    normalize_pixels,
    require_odd_window,
)

log = logging.getLogger(__name__)

FRAME_SUFFIX = ".jpg"
# Applied to any frame that is not already FRAME_SIZE x FRAME_SIZE.
RESIZE_FILTER = Image.BILINEAR


@dataclass
class VideoAnnotation:
    video_id: str
    labels: np.ndarray
    frame_dir: Optional[Path] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        bad = (self.labels < INVALID_CODE) | (self.labels >= NUM_CLASSES)
        if bad.any():
            raise ParseError(f"{self.video_id}: label codes outside {{-1..6}} at frames {np.flatnonzero(bad)[:10].tolist()}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_valid(self) -> int:
        return int((self.labels != INVALID_CODE).sum())

    @property
    def num_invalid(self) -> int:
        return len(self) - self.num_valid


@dataclass(frozen=True)
class WindowSpec:
    video_id: str
    frame_indices: Tuple[int, ...]
    center_index: int

    @property
    def T(self) -> int:
        return len(self.frame_indices)

    @property
    def center_frame(self) -> int:
        return self.frame_indices[self.center_index]


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, H, W, 3) float32, normalized
    labels: np.ndarray  # (T,) int64 codes
    spec: WindowSpec


def load_annotation_file(path: str | Path, frames_root: str | Path | None = None) -> VideoAnnotation:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise ParseError(f"{path}: empty annotation file")
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    labels = []
    for lineno, line in enumerate(lines, start=1):
        try:
            code = int(line.strip())
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: expected an integer label, got {line!r}") from None
        if not INVALID_CODE <= code < NUM_CLASSES:
            raise ParseError(f"{path}: line {lineno}: label {code} outside {{-1..6}}")
        labels.append(code)
    video_id = path.stem
    frame_dir = Path(frames_root) / video_id if frames_root is not None else None
    return VideoAnnotation(video_id, np.array(labels, dtype=np.int64), frame_dir)


def write_annotation_file(ann: VideoAnnotation, path: str | Path) -> None:
    Path(path).write_text("".join(f"{int(c)}\n" for c in ann.labels))


def load_split(annotations_root: str | Path, split: str, frames_root: str | Path | None = None) -> List[VideoAnnotation]:
    split_dir = Path(annotations_root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"annotation split directory not found: {split_dir}")
    return [load_annotation_file(p, frames_root) for p in sorted(split_dir.glob("*.txt"))]


def index_training_windows(ann: VideoAnnotation, T: int, stride: int) -> List[WindowSpec]:
    """Contiguous, unpadded windows; windows whose labels are all Invalid are dropped."""
    T = require_odd_window(T)
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    valid = ann.labels != INVALID_CODE
    center = (T - 1) // 2
    out = []
    for start in range(0, len(ann) - T + 1, stride):
        if valid[start:start + T].any():
            out.append(WindowSpec(ann.video_id, tuple(range(start, start + T)), center))
    return out


def inference_window(num_frames: int, frame: int, T: int) -> Tuple[int, ...]:
    half = (T - 1) // 2
    return tuple(min(max(i, 0), num_frames - 1) for i in range(frame - half, frame + half + 1))


def build_inference_windows(ann: VideoAnnotation, T: int) -> List[WindowSpec]:
    """One window per frame, centred on it, with edge frames replicated."""
    T = require_odd_window(T)
    center = (T - 1) // 2
    return [WindowSpec(ann.video_id, inference_window(len(ann), f, T), center) for f in range(len(ann))]


def frame_path(frames_root: str | Path, video_id: str, frame_index: int) -> Path:
    return Path(frames_root) / video_id / f"{frame_index:05d}{FRAME_SUFFIX}"


def read_frame_uint8(frames_root: str | Path, video_id: str, frame_index: int, size: int = FRAME_SIZE) -> np.ndarray:
    path = frame_path(frames_root, video_id, frame_index)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), RESIZE_FILTER)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise FrameReadError(video_id, frame_index, str(exc)) from exc
    return arr


def load_and_normalize_frame(
    frames_root: str | Path,
    video_id: str,
    frame_index: int,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Read one face crop as a normalized float32 (112, 112, 3) array."""
    out = normalize_pixels(read_frame_uint8(frames_root, video_id, frame_index), mean, std)
    if not np.all(np.isfinite(out)):
        raise FrameReadError(video_id, frame_index, "non-finite pixels after normalization")
    return out


class FrameStore:
    """Frame reader with an in-memory uint8 cache.

    Reads are side-effect free apart from filling the cache, so a store may be
    shared by data-loading workers that each hold their own copy.
    """

    def __init__(self, frames_root: str | Path, mean=None, std=None, cache: bool = True):
        self.frames_root = Path(frames_root)
        self.mean = mean
        self.std = std
        self.cache = cache
        self._raw: Dict[Tuple[str, int], np.ndarray] = {}

    def raw(self, video_id: str, frame_index: int) -> np.ndarray:
        key = (video_id, int(frame_index))
        arr = self._raw.get(key)
        if arr is None:
            arr = read_frame_uint8(self.frames_root, video_id, frame_index)
            if self.cache:
                self._raw[key] = arr
        return arr

    def frames(self, video_id: str, indices: Sequence[int]) -> np.ndarray:
        raw = np.stack([self.raw(video_id, i) for i in indices])
        return normalize_pixels(raw, self.mean, self.std)

    def sample(self, ann: VideoAnnotation, spec: WindowSpec) -> SequenceSample:
        idx = list(spec.frame_indices)
        return SequenceSample(self.frames(spec.video_id, idx), ann.labels[idx].copy(), spec)


# -- manifest -----------------------------------------------------------------

MANIFEST_FIELDS = ("split", "video_id", "frames", "valid")


def write_manifest(path: str | Path, entries: Sequence[Tuple[str, VideoAnnotation]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for split, ann in entries:
            w.writerow([split, ann.video_id, len(ann), ann.num_valid])


def read_manifest(path: str | Path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["frames"] = int(r["frames"])
        r["valid"] = int(r["valid"])
    return rows


# -- synthetic data -----------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale dataset where some classes are only separable through motion.

    Every video shows a tinted, noisy background with a bright square moving in
    a straight line at constant speed, never leaving the frame. For ordinary
    classes the tint identifies the class and the direction is random. All
    ``motion_classes`` share one tint and differ only in direction. Start
    points are drawn so that the whole path fits, which makes the pooled
    single-frame position distribution the same for every direction.

    ``motion_share`` sets the fraction of each split drawn from the motion
    classes; ``None`` cycles through all classes evenly. The default leans on
    the motion classes because a temporal head needs many examples of them
    before the direction cue is picked up.
    """

    num_videos: int = 300
    frames_per_video: int = 18
    image_size: int = FRAME_SIZE
    class_count: int = NUM_CLASSES
    motion_classes: Tuple[int, ...] = (5, 6)
    noise_level: float = 0.05
    val_fraction: float = 0.2
    invalid_fraction: float = 0.05
    motion_share: Optional[float] = 0.6

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.class_count != NUM_CLASSES:
            raise ConfigError(f"class_count must be {NUM_CLASSES}")
        if self.num_videos < 1 or self.frames_per_video < 1:
            raise ConfigError("num_videos and frames_per_video must be positive")
        mc = tuple(self.motion_classes)
        if len(set(mc)) != len(mc) or any(not 0 <= c < NUM_CLASSES for c in mc):
            raise ConfigError(f"motion_classes must be distinct codes in 0..6, got {mc}")
        if len(mc) == 1:
            raise ConfigError("a single motion class cannot be told apart by direction; use >= 2 or none")
        if not 0.0 <= self.val_fraction < 1.0 or not 0.0 <= self.invalid_fraction < 1.0:
            raise ConfigError("val_fraction and invalid_fraction must lie in [0, 1)")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if self.motion_share is not None:
            if not mc:
                raise ConfigError("motion_share needs motion_classes")
            if not 0.0 < self.motion_share < 1.0:
                raise ConfigError(f"motion_share must lie in (0, 1), got {self.motion_share}")

    @property
    def square_side(self) -> int:
        return max(2, self.image_size * 3 // 8)

    @property
    def step(self) -> int:
        """Pixels moved per frame; the full path spans about 90% of the free room."""
        room = self.image_size - self.square_side
        return max(1, int(0.9 * room / max(self.frames_per_video - 1, 1)))


def _tints(n: int) -> np.ndarray:
    hues = np.arange(n) / n
    out = []
    for h in hues:
        # HSV with S=0.7, V=0.75 -> RGB
        i = int(h * 6) % 6
        f = h * 6 - int(h * 6)
        v, s = 0.75, 0.7
        p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
        out.append([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])
    return np.asarray(out) * 255.0


def _directions(k: int) -> np.ndarray:
    ang = 2 * math.pi * np.arange(k) / k
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def render_synthetic_video(
    label: int, spec: SyntheticSpec, rng: np.random.Generator
) -> np.ndarray:
    """Return (frames, S, S, 3) uint8 frames for one single-class video."""
    S = spec.image_size
    motion = sorted(spec.motion_classes)
    static = [c for c in range(spec.class_count) if c not in motion]
    tints = _tints(len(static) + (1 if motion else 0))
    dirs = _directions(max(len(motion), 2))

    if label in motion:
        tint = tints[-1]
        direction = dirs[motion.index(label)]
    else:
        tint = tints[static.index(label)]
        direction = dirs[rng.integers(len(dirs))]

    side, n = spec.square_side, spec.frames_per_video
    offsets = np.rint(np.outer(np.arange(n), direction * spec.step)).astype(np.int64)  # (n, 2) as (dx, dy)
    far = offsets[-1]
    hi = S - side
    lo_xy = np.maximum(0, -far)
    hi_xy = np.minimum(hi, hi - far)
    x0, y0 = (int(rng.integers(lo, up + 1)) for lo, up in zip(lo_xy, hi_xy))

    out = np.empty((n, S, S, 3), dtype=np.uint8)
    for t in range(n):
        x, y = x0 + offsets[t, 0], y0 + offsets[t, 1]
        mask = np.zeros((S, S, 1), dtype=np.float64)
        mask[y:y + side, x:x + side] = 1.0
        img = tint * (1 - mask) + 255.0 * mask
        img = img + rng.normal(0.0, spec.noise_level * 255.0, size=img.shape)
        out[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out


def _split_labels(spec: SyntheticSpec, count: int, rng: np.random.Generator) -> List[int]:
    if spec.motion_share is None:
        return [k % spec.class_count for k in range(count)]
    motion = sorted(spec.motion_classes)
    static = [c for c in range(spec.class_count) if c not in motion]
    n_motion = int(round(count * spec.motion_share))
    labels = [motion[k % len(motion)] for k in range(n_motion)]
    labels += [static[k % len(static)] for k in range(count - n_motion)]
    return [labels[i] for i in rng.permutation(count)]


def generate_synthetic_dataset(
    spec: SyntheticSpec,
    frames_root: str | Path,
    annotations_root: str | Path,
    seed: int,
) -> List[Tuple[str, VideoAnnotation]]:
    """Write frames, per-split annotation files and ``<annotations_root>/manifest.csv``.

    Videos go to the ``train`` and ``val`` splits, with the same class mix in
    each. Deterministic in ``seed``.
    """
    spec.validate()
    frames_root = Path(frames_root)
    ann_root = Path(annotations_root)
    rng = np.random.default_rng(seed)

    n_val = int(round(spec.num_videos * spec.val_fraction))
    splits = [("train", spec.num_videos - n_val), ("val", n_val)]
    entries: List[Tuple[str, VideoAnnotation]] = []
    vid = 0
    for split, count in splits:
        (ann_root / split).mkdir(parents=True, exist_ok=True)
        for label in _split_labels(spec, count, rng):
            video_id = f"synth_{vid:04d}"
            vid += 1
            frames = render_synthetic_video(label, spec, rng)
            labels = np.full(spec.frames_per_video, label, dtype=np.int64)
            labels[rng.random(spec.frames_per_video) < spec.invalid_fraction] = INVALID_CODE
            vdir = frames_root / video_id
            vdir.mkdir(parents=True, exist_ok=True)
            for t, img in enumerate(frames):
                Image.fromarray(img).save(frame_path(frames_root, video_id, t), quality=95)
            ann = VideoAnnotation(video_id, labels, vdir)
            write_annotation_file(ann, ann_root / split / f"{video_id}.txt")
            entries.append((split, ann))
    write_manifest(ann_root / "manifest.csv", entries)
    log.info("wrote %d synthetic videos under %s", len(entries), ann_root)
    return entries
