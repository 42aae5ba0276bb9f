"""Label space, errors, and small numeric helpers shared across the package."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

NUM_CLASSES = 7
INVALID_CODE = -1
FRAME_SIZE = 112

# ImageNet statistics; the torchvision ResNet50 and most converted face backbones expect these.
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


class FERError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FERError, ValueError):
    pass


class ConfigError(FERError, ValueError):
    pass


class ParseError(FERError, ValueError):
    pass


class LoadError(FERError, RuntimeError):
    pass


class FrameReadError(FERError, OSError):
    def __init__(self, video_id: str, frame_index: int, reason: str = ""):
        self.video_id = video_id
        self.frame_index = frame_index
        msg = f"cannot read frame {frame_index} of video {video_id!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


@dataclass(frozen=True)
class ExpressionLabel:
    code: int
    name: str

    @property
    def is_valid(self) -> bool:
        return self.code != INVALID_CODE


INVALID = ExpressionLabel(INVALID_CODE, "Invalid")

DEFAULT_CLASS_NAMES = (
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
)

_LABEL_LINE = re.compile(r"^(-?\d+),([A-Za-z]+)$")


class LabelMap:
    """Bijection between integer annotation codes and expression names.

    Codes 0..6 are the valid classes; -1 is always the Invalid marker.
    """

    def __init__(self, names: Sequence[str] = DEFAULT_CLASS_NAMES):
        if len(names) != NUM_CLASSES:
            raise ConfigError(f"label map needs {NUM_CLASSES} class names, got {len(names)}")
        if len(set(names)) != NUM_CLASSES or INVALID.name in names:
            raise ConfigError("label map names must be unique and must not use 'Invalid'")
        self.labels: Tuple[ExpressionLabel, ...] = tuple(
            ExpressionLabel(i, n) for i, n in enumerate(names)
        )
        self._by_name: Dict[str, ExpressionLabel] = {l.name: l for l in self.labels}
        self._by_name[INVALID.name] = INVALID

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(l.name for l in self.labels)

    def decode(self, code: int) -> ExpressionLabel:
        if isinstance(code, bool) or not isinstance(code, (int, np.integer)):
            raise ParseError(f"label code must be an integer, got {code!r}")
        code = int(code)
        if code == INVALID_CODE:
            return INVALID
        if 0 <= code < NUM_CLASSES:
            return self.labels[code]
        raise ParseError(f"label code {code} outside {{-1, 0..{NUM_CLASSES - 1}}}")

    def encode(self, label: ExpressionLabel | str) -> int:
        name = label if isinstance(label, str) else label.name
        try:
            return self._by_name[name].code
        except KeyError:
            raise ParseError(f"unknown expression name {name!r}") from None

    def to_text(self) -> str:
        return "".join(f"{l.code},{l.name}\n" for l in (*self.labels, INVALID))

    @classmethod
    def from_text(cls, text: str) -> "LabelMap":
        if text.endswith("\n"):
            text = text[:-1]
        names: Dict[int, str] = {}
        for lineno, line in enumerate(text.split("\n"), start=1):
            m = _LABEL_LINE.match(line)
            if m is None:
                raise ParseError(f"label map line {lineno}: expected 'code,name', got {line!r}")
            code, name = int(m.group(1)), m.group(2)
            if code in names:
                raise ParseError(f"label map line {lineno}: duplicate code {code}")
            names[code] = name
        if INVALID_CODE in names and names.pop(INVALID_CODE) != INVALID.name:
            raise ParseError("code -1 must be named 'Invalid'")
        if sorted(names) != list(range(NUM_CLASSES)):
            raise ParseError(f"label map must define codes 0..{NUM_CLASSES - 1} exactly once")
        return cls([names[i] for i in range(NUM_CLASSES)])

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelMap) and self.names == other.names

    def __repr__(self) -> str:
        return f"LabelMap({list(self.names)})"


DEFAULT_LABEL_MAP = LabelMap()


def label_codec(code: int, label_map: LabelMap = DEFAULT_LABEL_MAP) -> ExpressionLabel:
    return label_map.decode(code)


def label_code(label: ExpressionLabel | str, label_map: LabelMap = DEFAULT_LABEL_MAP) -> int:
    return label_map.encode(label)


def softmax(logits: Iterable[float], axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (float64)."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("softmax input contains non-finite values")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def argmax_lowest(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    # np.argmax already returns the first maximal index, i.e. the lowest code on ties.
    return np.argmax(probs, axis=axis)


def require_odd_window(T: int, name: str = "window length") -> int:
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {T!r}")
    if T < 1 or T % 2 == 0:
        raise ConfigError(f"{name} must be a positive odd integer, got {T}")
    return int(T)


def normalize_pixels(
    image: np.ndarray,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """uint8 (..., 3) image -> float32 standardized array of the same shape."""
    mean_arr = np.asarray(PIXEL_MEAN if mean is None else mean, dtype=np.float32)
    std_arr = np.asarray(PIXEL_STD if std is None else std, dtype=np.float32)
    return (np.asarray(image, dtype=np.float32) / 255.0 - mean_arr) / std_arr
