"""Frame-wise CNN backbones and the static, GRU and transformer heads.

Every model maps frames shaped (B, T, 112, 112, 3) to logits shaped (B, T, 7).
The backbone is applied to each frame independently; only the head looks
across time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FRAME_SIZE, NUM_CLASSES, ConfigError, InvalidInputError, LoadError

log = logging.getLogger(__name__)

BACKBONE_DIMS = {"resnet50": 2048, "tiny": 128}
HEAD_KINDS = ("static", "gru", "transformer")
WEIGHTS_FORMAT = "videofer-weights/1"


@dataclass
class BackboneConfig:
    architecture: str = "resnet50"
    pretrained_weights_path: Optional[str] = None

    def validate(self) -> None:
        if self.architecture not in BACKBONE_DIMS:
            raise ConfigError(f"unknown backbone {self.architecture!r}; expected one of {sorted(BACKBONE_DIMS)}")

    @property
    def feature_dim(self) -> int:
        return BACKBONE_DIMS[self.architecture]


@dataclass
class TemporalHeadConfig:
    kind: str = "static"
    gru_layers: int = 2
    gru_hidden: int = 512
    tf_model_dim: int = 512
    tf_heads: int = 4
    tf_layers: int = 2
    tf_ffn_dim: int = 1024
    dropout: float = 0.1

    def validate(self) -> None:
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.kind == "gru" and self.gru_layers != 2:
            raise ConfigError(f"the GRU head is two layers deep, got gru_layers={self.gru_layers}")
        if self.tf_model_dim % self.tf_heads != 0:
            raise ConfigError(f"tf_model_dim={self.tf_model_dim} not divisible by tf_heads={self.tf_heads}")
        if self.tf_model_dim % 2:
            raise ConfigError("tf_model_dim must be even for sinusoidal positional encoding")
        for name in ("gru_hidden", "tf_model_dim", "tf_heads", "tf_layers", "tf_ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def config_fingerprint(*configs) -> str:
    payload = [asdict(c) if not isinstance(c, dict) else c for c in configs]
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- backbones ------------------------------------------------------------------

class TinyBackbone(nn.Module):
    """Small strided CNN for desk-scale runs.

    Keeps a 7x7 spatial grid before the projection so features still encode
    where things are in the frame.
    """

    out_dim = BACKBONE_DIMS["tiny"]

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 5, stride=4, padding=2, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
        )
        self.proj = nn.Linear(32 * 7 * 7, self.out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        return F.relu(self.proj(torch.flatten(x, 1)))


class ResNet50Backbone(nn.Module):
    """torchvision ResNet50 with the classifier removed (2048-d pooled output)."""

    out_dim = BACKBONE_DIMS["resnet50"]
    classifier_prefix = "fc."

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        self.net = resnet50(weights=None)
        self.net.fc = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    cfg.validate()
    if cfg.architecture == "tiny":
        return TinyBackbone()
    return ResNet50Backbone()


def _strip_prefixes(name: str) -> str:
    prefixes = ("module.", "net.", "backbone.")
    while name.startswith(prefixes):
        name = name.split(".", 1)[1]
    return name


def load_backbone_weights(backbone: nn.Module, path: str | Path) -> int:
    """Copy pretrained arrays into ``backbone``; returns how many were matched.

    Accepts either this package's weight container or a bare state dict (e.g. a
    converted VGGFace2 ResNet50). Classifier arrays (``fc.*``) are never loaded.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"backbone weight file not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(blob, dict) and blob.get("format") == WEIGHTS_FORMAT:
        blob = {k[len("backbone."):]: v for k, v in blob["params"].items() if k.startswith("backbone.")}
    elif isinstance(blob, dict) and "state_dict" in blob:
        blob = blob["state_dict"]
    if not isinstance(blob, dict):
        raise LoadError(f"{path}: not a state dict")

    incoming = {}
    for name, value in blob.items():
        if not torch.is_tensor(value):
            continue
        key = _strip_prefixes(name)
        if key.startswith("fc.") or key.startswith("classifier."):
            continue
        incoming[key] = value

    own = {_strip_prefixes(k): k for k in backbone.state_dict()}
    target = backbone.state_dict()
    matched = 0
    for key, value in incoming.items():
        if key not in own:
            continue
        full = own[key]
        if tuple(target[full].shape) != tuple(value.shape):
            raise LoadError(
                f"{path}: shape mismatch for parameter {key!r}: file {tuple(value.shape)} vs model {tuple(target[full].shape)}"
            )
        target[full] = value.to(target[full].dtype)
        matched += 1
    missing = sorted(set(own) - set(incoming))
    backbone.load_state_dict(target)
    log.info("loaded %d/%d backbone arrays from %s", matched, len(own), path)
    if missing:
        log.warning("%d backbone arrays kept their initial values, e.g. %s", len(missing), missing[:5])
    return matched


# -- heads ----------------------------------------------------------------------

def positional_encoding(T: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos."""
    if d < 2 or d % 2:
        raise ConfigError(f"positional encoding dimension must be even and >= 2, got {d}")
    if T < 1:
        raise ConfigError(f"positional encoding length must be >= 1, got {T}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d)
    pe = np.empty((T, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _check_features(x: torch.Tensor) -> None:
    if x.dim() != 3:
        raise InvalidInputError(f"expected features shaped (B, T, D), got {tuple(x.shape)}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidInputError(f"batch and time dimensions must be >= 1, got {tuple(x.shape)}")


class StaticHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_features(x)
        return self.fc(x)


class GRUHead(nn.Module):
    """Two stacked unidirectional GRU layers followed by a per-step classifier."""

    def __init__(self, in_dim: int, hidden: int, num_layers: int = 2, dropout: float = 0.0,
                 num_classes: int = NUM_CLASSES):
        super().__init__()
        self.gru = nn.GRU(in_dim, hidden, num_layers=num_layers, batch_first=True,
                          dropout=dropout if num_layers > 1 else 0.0)
        self.fc = nn.Linear(hidden, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_features(x)
        out, _ = self.gru(x)
        return self.fc(out)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        assert dim % num_heads == 0, "dim must be a multiple of num_heads"
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.num_heads, self.head_dim).transpose(1, 2)  # (B, H, T, hd)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # (B, H, T, T)
        weights = self.attn_drop(scores.softmax(dim=-1))
        ctx = (weights @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(ctx)


class EncoderBlock(nn.Module):
    """Pre-norm encoder block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ffn(self.norm2(x)))


class TransformerHead(nn.Module):
    def __init__(self, in_dim: int, model_dim: int, num_heads: int, num_layers: int,
                 ffn_dim: int, dropout: float = 0.0, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.model_dim = model_dim
        self.proj = nn.Linear(in_dim, model_dim)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(model_dim, num_heads, ffn_dim, dropout) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(model_dim)
        self.fc = nn.Linear(model_dim, num_classes)
        # Test hook: switching this off makes the head permutation-equivariant in time.
        self.use_positional_encoding = True
        self._pe_cache: Dict[Tuple[int, torch.dtype], torch.Tensor] = {}

    def _pe(self, T: int, like: torch.Tensor) -> torch.Tensor:
        key = (T, like.dtype)
        pe = self._pe_cache.get(key)
        if pe is None:
            pe = torch.from_numpy(positional_encoding(T, self.model_dim)).to(like.dtype)
            self._pe_cache[key] = pe
        return pe.to(like.device)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_features(x)
        h = self.proj(x)
        if self.use_positional_encoding:
            h = h + self._pe(x.shape[1], h)
        h = self.drop(h)
        for block in self.blocks:
            h = block(h)
        return self.fc(self.norm(h))


def build_head(cfg: TemporalHeadConfig, in_dim: int) -> nn.Module:
    cfg.validate()
    if cfg.kind == "static":
        return StaticHead(in_dim)
    if cfg.kind == "gru":
        return GRUHead(in_dim, cfg.gru_hidden, cfg.gru_layers, cfg.dropout)
    return TransformerHead(in_dim, cfg.tf_model_dim, cfg.tf_heads, cfg.tf_layers, cfg.tf_ffn_dim, cfg.dropout)


# -- full model -----------------------------------------------------------------

class ExpressionModel(nn.Module):
    """Backbone + head. Each ensemble member owns its own backbone copy."""

    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: TemporalHeadConfig):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        self.backbone = build_backbone(backbone_cfg)
        self.head = build_head(head_cfg, backbone_cfg.feature_dim)

    @property
    def kind(self) -> str:
        return self.head_cfg.kind

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.backbone_cfg, self.head_cfg)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) normalized frames -> (B, T, D) features."""
        if frames.dim() != 5 or frames.shape[-1] != 3:
            raise InvalidInputError(f"expected frames shaped (B, T, H, W, 3), got {tuple(frames.shape)}")
        B, T, H, W, _ = frames.shape
        if B < 1 or T < 1:
            raise InvalidInputError(f"batch and time dimensions must be >= 1, got {tuple(frames.shape)}")
        if (H, W) != (FRAME_SIZE, FRAME_SIZE):
            raise InvalidInputError(f"frames must be {FRAME_SIZE}x{FRAME_SIZE}, got {H}x{W}")
        x = frames.reshape(B * T, H, W, 3).permute(0, 3, 1, 2)
        return self.backbone(x).reshape(B, T, -1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(frames))


def build_model(backbone_cfg: BackboneConfig, head_cfg: TemporalHeadConfig, load_pretrained: bool = True) -> ExpressionModel:
    model = ExpressionModel(backbone_cfg, head_cfg)
    if load_pretrained and backbone_cfg.pretrained_weights_path:
        load_backbone_weights(model.backbone, backbone_cfg.pretrained_weights_path)
    return model


def save_weights(model: ExpressionModel, path: str | Path, extra: Optional[dict] = None) -> None:
    """Write the named-array container: format tag, fingerprint, configs, shapes, params."""
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    blob = {
        "format": WEIGHTS_FORMAT,
        "fingerprint": model.fingerprint,
        "config": {"backbone": asdict(model.backbone_cfg), "head": asdict(model.head_cfg)},
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "params": state,
    }
    if extra:
        blob.update(extra)
    torch.save(blob, Path(path))


def read_weights(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != WEIGHTS_FORMAT:
        raise LoadError(f"{path}: not a {WEIGHTS_FORMAT} container")
    for name, shape in blob["shapes"].items():
        if list(blob["params"][name].shape) != shape:
            raise LoadError(f"{path}: parameter {name!r} does not match its recorded shape {shape}")
    return blob


def load_model(path: str | Path) -> ExpressionModel:
    blob = read_weights(path)
    model = ExpressionModel(BackboneConfig(**blob["config"]["backbone"]), TemporalHeadConfig(**blob["config"]["head"]))
    if model.fingerprint != blob["fingerprint"]:
        raise LoadError(f"{path}: stored fingerprint does not match its stored config")
    model.load_state_dict(blob["params"])
    return model
