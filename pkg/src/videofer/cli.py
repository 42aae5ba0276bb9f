"""Run configuration and the ``videofer`` command line.

Config files are flat YAML mappings whose keys carry a section prefix, e.g.::

    paths.frames_root: data/frames
    paths.annotations_root: data/annotations
    paths.output_dir: runs/exp1
    train.base_lr: 0.0005
    head.gru_hidden: 512
    ensemble.weights: [0.4, 0.3, 0.3]

A bare key (``window_T: 9``) is accepted when exactly one section defines it.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .core import DEFAULT_LABEL_MAP, PIXEL_MEAN, PIXEL_STD, INVALID_CODE, ConfigError, FERError, LabelMap
from .dataio import FrameStore, SyntheticSpec, generate_synthetic_dataset, load_split
from .inference import (
    ENSEMBLE_MODELS,
    EnsembleConfig,
    ensemble_combine,
    predict_videos,
    records_for_video,
    search_ensemble_weights,
    evaluate_probs,
    write_predictions,
)
from .metrics import evaluate_files
from .models import BackboneConfig, TemporalHeadConfig, build_model, load_model
from .training import TrainConfig, fit

log = logging.getLogger("videofer")

COMMANDS = ("synth", "train", "predict", "evaluate", "ensemble-search")
MODEL_CHOICES = ENSEMBLE_MODELS + ("all",)


@dataclass
class DataConfig:
    train_split: str = "train"
    val_split: str = "val"
    predict_split: str = "val"
    pixel_mean: Tuple[float, ...] = PIXEL_MEAN
    pixel_std: Tuple[float, ...] = PIXEL_STD


@dataclass
class SynthConfig:
    num_videos: int = 300
    frames_per_video: int = 18
    image_size: int = 112
    motion_classes: Tuple[int, ...] = (5, 6)
    noise_level: float = 0.05
    val_fraction: float = 0.2
    invalid_fraction: float = 0.05
    motion_share: Optional[float] = 0.6
    seed: int = 7

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_videos=self.num_videos,
            frames_per_video=self.frames_per_video,
            image_size=self.image_size,
            motion_classes=tuple(self.motion_classes),
            noise_level=self.noise_level,
            val_fraction=self.val_fraction,
            invalid_fraction=self.invalid_fraction,
            motion_share=self.motion_share,
        )


@dataclass
class PathsConfig:
    frames_root: str = ""
    annotations_root: str = ""
    output_dir: str = ""


@dataclass
class SearchConfig:
    weights: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    mode: str = "prob"
    search_step: float = 0.05


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: TemporalHeadConfig = field(default_factory=TemporalHeadConfig)
    ensemble: SearchConfig = field(default_factory=SearchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    label_map: Optional[str] = None
    deterministic: bool = False

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(tuple(self.ensemble.weights), self.ensemble.mode)

    def head_for(self, kind: str) -> TemporalHeadConfig:
        return dataclasses.replace(self.head, kind=kind)

    def labels(self) -> LabelMap:
        return LabelMap.load(self.label_map) if self.label_map else DEFAULT_LABEL_MAP


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig) if dataclasses.is_dataclass(f.default_factory)}
# head.kind comes from --model; the feature size follows from the architecture.
HIDDEN_KEYS = {"head.kind"}


def _section_fields() -> Dict[str, Any]:
    out = {}
    for sec, f in SECTIONS.items():
        cls = f.default_factory
        hints = typing.get_type_hints(cls)
        for sf in dataclasses.fields(cls):
            key = f"{sec}.{sf.name}"
            if key not in HIDDEN_KEYS:
                out[key] = hints[sf.name]
    hints = typing.get_type_hints(RunConfig)
    for name in ("label_map", "deterministic"):
        out[name] = hints[name]
    return out


FIELD_TYPES = _section_fields()


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(key: str, value: Any, tp) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__} {value!r}")
        return tuple(_coerce(key, v, args[0]) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__} {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__} {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__} {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {type(value).__name__} {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {_type_name(tp)}")


def _flatten(raw: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in raw.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _resolve_key(key: str) -> str:
    if key in FIELD_TYPES:
        return key
    if "." not in key:
        hits = [k for k in FIELD_TYPES if k.split(".", 1)[-1] == key]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ConfigError(f"ambiguous config key {key!r}; use one of {hits}")
    raise ConfigError(f"unknown config key {key!r}")


def config_from_mapping(raw: Dict[str, Any]) -> RunConfig:
    values: Dict[str, Any] = {}
    for key, value in _flatten(raw or {}).items():
        full = _resolve_key(key)
        if full in values:
            raise ConfigError(f"config key {full!r} given twice")
        values[full] = _coerce(full, value, FIELD_TYPES[full])

    kwargs: Dict[str, Any] = {}
    for sec, f in SECTIONS.items():
        sub = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(sec + ".")}
        kwargs[sec] = f.default_factory(**sub)
    for name in ("label_map", "deterministic"):
        if name in values:
            kwargs[name] = values[name]
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    cfg.train.validate()
    cfg.backbone.validate()
    dataclasses.replace(cfg.head, kind="gru").validate()
    dataclasses.replace(cfg.head, kind="transformer").validate()
    if len(cfg.ensemble.weights) != len(ENSEMBLE_MODELS):
        raise ConfigError(f"ensemble.weights needs {len(ENSEMBLE_MODELS)} entries (static, gru, transformer)")
    cfg.ensemble_config()
    cfg.synth.spec().validate()
    if len(cfg.data.pixel_mean) != 3 or len(cfg.data.pixel_std) != 3 or min(cfg.data.pixel_std) <= 0:
        raise ConfigError("data.pixel_mean/pixel_std need 3 entries and positive std")
    for name in ("frames_root", "annotations_root", "output_dir"):
        if not getattr(cfg.paths, name):
            raise ConfigError(f"paths.{name} is required")


def check_paths(cfg: RunConfig) -> None:
    for name in ("frames_root", "annotations_root"):
        p = Path(getattr(cfg.paths, name))
        if not p.is_dir():
            raise ConfigError(f"paths.{name} does not exist: {p}")
    if cfg.label_map and not Path(cfg.label_map).is_file():
        raise ConfigError(f"label_map file does not exist: {cfg.label_map}")


def parse_config(path: str | Path, require_paths: bool = True) -> RunConfig:
    """Read, validate and echo a run configuration with all defaults filled in."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    cfg = config_from_mapping(raw or {})
    if require_paths:
        check_paths(cfg)
    log.info("effective configuration:\n%s", dump_config(cfg))
    return cfg


def config_to_flat(cfg: RunConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key in FIELD_TYPES:
        obj: Any = cfg
        for part in key.split("."):
            obj = getattr(obj, part)
        out[key] = list(obj) if isinstance(obj, tuple) else obj
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_flat(cfg), sort_keys=False, default_flow_style=None)


# -- commands -------------------------------------------------------------------

def _store(cfg: RunConfig) -> FrameStore:
    return FrameStore(cfg.paths.frames_root, cfg.data.pixel_mean, cfg.data.pixel_std)


def _split(cfg: RunConfig, name: str, required: bool = True):
    split_dir = Path(cfg.paths.annotations_root) / name
    if not split_dir.is_dir():
        if required:
            raise ConfigError(f"annotation split {name!r} not found under {cfg.paths.annotations_root}")
        return []
    return load_split(cfg.paths.annotations_root, name, cfg.paths.frames_root)


def _models(model: str) -> List[str]:
    return list(ENSEMBLE_MODELS) if model == "all" else [model]


def _checkpoint_path(cfg: RunConfig, kind: str) -> Path:
    d = Path(cfg.paths.output_dir) / kind
    for name in ("best.pt", "last.pt"):
        if (d / name).is_file():
            return d / name
    raise FileNotFoundError(f"no trained {kind} model under {d}; run 'train --model {kind}' first")


def cmd_synth(cfg: RunConfig, args) -> int:
    entries = generate_synthetic_dataset(cfg.synth.spec(), cfg.paths.frames_root, cfg.paths.annotations_root,
                                         cfg.synth.seed)
    print(f"wrote {len(entries)} videos to {cfg.paths.frames_root} and {cfg.paths.annotations_root}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    if args.model == "all":
        raise ConfigError("train builds one model per invocation; pass --model static|gru|transformer")
    out = Path(cfg.paths.output_dir) / args.model
    if out.exists() and any(out.iterdir()):
        for stale in ("train_log.jsonl", "last.pt", "best.pt"):
            (out / stale).unlink(missing_ok=True)
    train = _split(cfg, cfg.data.train_split)
    val = _split(cfg, cfg.data.val_split, required=False)
    store = _store(cfg)
    if cfg.deterministic:
        from .training import set_deterministic
        set_deterministic(cfg.train.seed)
    model = build_model(cfg.backbone, cfg.head_for(args.model))
    result = fit(model, train, store, cfg.train, val_videos=val or None, out_dir=out,
                 deterministic=cfg.deterministic)
    last = result.history[-1]
    print(f"{args.model}: epoch-0 loss {result.history[0].train_loss!r}, final loss {last.train_loss!r}"
          + ("" if last.val_e_total is None else f", val E_total {last.val_e_total:.4f}"))
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    videos = _split(cfg, cfg.data.predict_split)
    store = _store(cfg)
    out = Path(cfg.paths.output_dir)
    per_model = {}
    for kind in _models(args.model):
        model = load_model(_checkpoint_path(cfg, kind))
        probs = predict_videos(model, videos, store, cfg.train.window_T)
        per_model[kind] = probs
        _write(out / f"predictions_{kind}.csv", videos, probs)
    if args.model == "all":
        ens = cfg.ensemble_config()
        combined = {v.video_id: ensemble_combine([per_model[k][v.video_id] for k in ENSEMBLE_MODELS], ens)
                    for v in videos}
        _write(out / "predictions_ensemble.csv", videos, combined)
    return 0


def _write(path: Path, videos, probs) -> None:
    # Frames annotated as invalid carry no target, so they get no row.
    records = []
    for v in sorted(videos, key=lambda a: a.video_id):
        records.extend(r for r in records_for_video(v.video_id, probs[v.video_id])
                       if v.labels[r.frame_index] != INVALID_CODE)
    write_predictions(records, path)
    print(f"wrote {len(records)} predictions to {path}")


def cmd_evaluate(cfg: RunConfig, args) -> int:
    videos = _split(cfg, cfg.data.predict_split)
    out = Path(cfg.paths.output_dir)
    names = _models(args.model) + (["ensemble"] if args.model == "all" else [])
    found = 0
    for name in names:
        pred = out / f"predictions_{name}.csv"
        if not pred.is_file():
            if args.model == "all":
                continue
            raise FileNotFoundError(f"{pred} not found; run 'predict --model {name}' first")
        report = evaluate_files(pred, videos)
        (out / f"metrics_{name}.txt").write_text(report.to_text())
        print(f"== {name} ==")
        print(report.render(cfg.labels().names))
        found += 1
    if not found:
        raise FileNotFoundError(f"no prediction files in {out}")
    return 0


def cmd_ensemble_search(cfg: RunConfig, args) -> int:
    videos = _split(cfg, cfg.data.val_split)
    store = _store(cfg)
    model_probs = []
    for kind in ENSEMBLE_MODELS:
        model = load_model(_checkpoint_path(cfg, kind))
        probs = predict_videos(model, videos, store, cfg.train.window_T)
        model_probs.append(probs)
        print(f"{kind:<12} E_total {evaluate_probs(videos, probs).e_total:.4f}")
    best, report = search_ensemble_weights(videos, model_probs, cfg.ensemble.search_step, cfg.ensemble.mode)
    weights = [round(w, 10) for w in best.weights]
    print(f"best weights {weights} -> E_total {report.e_total:.4f}")
    (Path(cfg.paths.output_dir) / "ensemble_weights.yaml").write_text(
        yaml.safe_dump({"ensemble.weights": list(best.weights), "ensemble.mode": best.mode,
                        "e_total": report.e_total}, sort_keys=False))
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ensemble-search": cmd_ensemble_search,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="videofer", description="Video facial expression recognition pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration (flat YAML)")
    parser.add_argument("--model", choices=MODEL_CHOICES, default="all")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--deterministic", action="store_true", help="enable deterministic kernels")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(command: str, cfg: RunConfig, model: str = "all") -> int:
    args = argparse.Namespace(model=model)
    return HANDLERS[command](cfg, args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, require_paths=args.command != "synth")
        if args.seed is not None:
            cfg.train.seed = args.seed
        if args.deterministic:
            cfg.deterministic = True
        out = Path(cfg.paths.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
        return dispatch(args.command, cfg, args.model)
    except (FERError, OSError, ValueError, KeyError) as exc:
        print(f"videofer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
