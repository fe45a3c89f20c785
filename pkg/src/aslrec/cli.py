"""Command-line entry point: dataset synthesis, training, evaluation, stream inference, inspection.

Run configs are YAML documents with three sections::

    model:  {width_multiplier: 0.25, input_spatial: 64, input_temporal: 8, embedding_dim: 256, ...}
    train:  {base_lr: 0.01, max_epochs: 30, ...}
    data:   {num_classes: 10, clips_per_class: 20, ...}   # synthetic dataset spec

Any key can be overridden from the command line with ``--set section.key=value``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from .backbone import BackboneConfig, default_backbone_config, model_stats
from .data import SyntheticDatasetSpec, VideoDataset, load_video, write_synthetic_dataset
from .evaluator import evaluate
from .model import SignRecognitionNet
from .stream import StreamRecognizer
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("aslrec")

_BACKBONE_KEYS = [f.name for f in fields(BackboneConfig) if f.name not in ("layers", "expected_sizes")]


class RunConfigError(ValueError):
    pass


def default_run_config() -> Dict[str, Dict[str, Any]]:
    backbone = default_backbone_config().to_document()
    model = {k: backbone[k] for k in _BACKBONE_KEYS}
    model["embedding_dim"] = 256
    return {"model": model, "train": asdict(TrainConfig()), "data": SyntheticDatasetSpec().to_dict()}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise RunConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise RunConfigError(f"{key}: expected an integer, got {value!r}")
            return int(value)
        return type(default)(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise RunConfigError(f"{key}: expected a list of {len(default)} values, got {value!r}")
        return [_coerce(f"{key}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default))]
    if isinstance(default, str) and not isinstance(value, str):
        raise RunConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _merge(config: dict, doc: dict, origin: str) -> None:
    for section, values in doc.items():
        if section not in config:
            raise RunConfigError(f"{origin}: unknown section {section!r} (expected one of {sorted(config)})")
        if not isinstance(values, dict):
            raise RunConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in config[section]:
                raise RunConfigError(f"{origin}: unknown key {section}.{key}")
            config[section][key] = _coerce(f"{section}.{key}", value, config[section][key])


def parse_overrides(items: Sequence[str]) -> dict:
    """``["train.base_lr=0.03"]`` -> ``{"train": {"base_lr": 0.03}}``; values are parsed as YAML scalars."""
    doc: Dict[str, dict] = {}
    for item in items:
        if "=" not in item:
            raise RunConfigError(f"override {item!r} is not of the form section.key=value")
        path, raw = item.split("=", 1)
        if "." not in path:
            raise RunConfigError(f"override key {path!r} needs a section prefix, e.g. train.{path}")
        section, key = path.split(".", 1)
        doc.setdefault(section, {})[key] = yaml.safe_load(raw)
    return doc


def parse_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the file, then command-line overrides; unknown keys raise :class:`RunConfigError`."""
    config = default_run_config()
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise RunConfigError(f"{path}: top level must be a mapping")
        _merge(config, doc, str(path))
    _merge(config, parse_overrides(overrides), "command line")
    return config


def build_model_from_config(model_cfg: dict, num_classes: int, seed: int) -> SignRecognitionNet:
    backbone_keys = {k: v for k, v in model_cfg.items() if k != "embedding_dim"}
    for key in ("input_mean", "input_std"):
        backbone_keys[key] = tuple(backbone_keys[key])
    torch.manual_seed(seed)
    return SignRecognitionNet(default_backbone_config(**backbone_keys), num_classes, model_cfg["embedding_dim"],
                              generator=torch.Generator().manual_seed(seed))


# --------------------------------------------------------------------------- commands

def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1))


def cmd_synth_data(args, config: dict) -> dict:
    spec = SyntheticDatasetSpec.from_dict(config["data"])
    manifest = write_synthetic_dataset(spec, args.out)
    log.info(json.dumps({"event": "synth-data", "manifest": str(manifest), "clips": spec.num_classes * spec.clips_per_class}))
    return {"manifest": str(manifest)}


def cmd_train(args, config: dict) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    train = VideoDataset.from_manifest(args.data)
    val = VideoDataset.from_manifest(args.val) if args.val else None
    train_cfg = TrainConfig.from_dict(config["train"])
    model = build_model_from_config(config["model"], train.num_classes, train_cfg.seed)
    history_path = out / "history.jsonl"
    with open(history_path, "w") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record) + "\n")
            fh.flush()
        result = fit(model, train, train_cfg, val=val, on_epoch=on_epoch)
    names = {a.label: a.label_name for a in train.annotations}
    ckpt = out / "checkpoint.npz"
    save_checkpoint(model, ckpt, train_cfg, epoch=result.best_epoch,
                    extra={"label_names": [names.get(k, str(k)) for k in range(model.num_classes)],
                           "run_config": config, "aborted": result.aborted})
    log.info(json.dumps({"event": "train", "checkpoint": str(ckpt), "epochs": len(result.history),
                         "best_epoch": result.best_epoch, "aborted": result.aborted}))
    if result.aborted:
        raise RuntimeError(f"training aborted: {result.history[-1].get('aborted')}")
    return {"checkpoint": str(ckpt)}


def cmd_evaluate(args, config: dict) -> dict:
    model = load_checkpoint(args.checkpoint).build_model()
    dataset = VideoDataset.from_manifest(args.data)
    report = evaluate(model, dataset).to_dict()
    report["checkpoint"] = str(args.checkpoint)
    report["data"] = str(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    log.info(json.dumps({"event": "evaluate", "top1": report["top1"], "mAP": report["mAP"]}))
    return report


def read_boxes(path) -> np.ndarray:
    """One ``x0 y0 x1 y1`` box per line; commas or whitespace separate the values."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 box values, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def cmd_infer(args, config: dict) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    names = ckpt.manifest.get("extra", {}).get("label_names")
    frames = load_video(args.frames_dir)
    boxes = read_boxes(args.boxes)
    if len(boxes) != len(frames):
        raise ValueError(f"{len(frames)} frames but {len(boxes)} boxes")
    stream = StreamRecognizer(model, threshold=args.threshold, stride=args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emitted = 0
    with open(out / "predictions.tsv", "w") as fh:
        fh.write("frame\tlabel\tconfidence\n")
        for i, (frame, box) in enumerate(zip(frames, boxes)):
            pred = stream.push_frame(frame, box)
            if pred is None:
                continue
            label = "-" if pred.label is None else (names[pred.label] if names else str(pred.label))
            fh.write(f"{i}\t{label}\t{pred.confidence:.6f}\n")
            emitted += 1
    log.info(json.dumps({"event": "infer", "frames": len(frames), "predictions": emitted}))
    return {"predictions": emitted}


def cmd_inspect(args, config: dict) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    stats = model_stats(model)
    summary = {"params": stats["params"], "flops": stats["flops"], "num_classes": model.num_classes,
               "input_shape": list(model.input_shape), "epoch": ckpt.manifest.get("epoch"),
               "entries": len(ckpt.state)}
    print(json.dumps(summary))
    return summary


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "infer": cmd_infer, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aslrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_flag="--config"):
        p.add_argument(config_flag, dest="config", default=None, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("synth-data", help="render the synthetic motion dataset")
    common(p, "--spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a manifest")
    common(p)
    p.add_argument("--data", required=True, help="training manifest or dataset directory")
    p.add_argument("--val", default=None, help="optional validation manifest for early stopping")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="run the test protocol and write report.json")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="stream numbered frames through the sliding-window recognizer")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=1)

    p = sub.add_parser("inspect", help="print parameter and FLOP counts of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    return parser


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                payload = {"message": payload}
        except ValueError:
            payload = {"message": msg}
        payload = {"time": round(time.time(), 3), "level": record.levelname.lower(), "logger": record.name,
                   **payload}
        return json.dumps(payload)


def _setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        config = parse_config(args.config, args.overrides)
        log.info(json.dumps({"event": "config", "command": args.command, "config": config}))
        COMMANDS[args.command](args, config)
    except Exception as exc:  # every failure becomes a logged error and a non-zero exit
        log.error(json.dumps({"event": "error", "command": args.command, "error": f"{type(exc).__name__}: {exc}"}))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", {"command": args.command, "error": str(exc),
                                             "type": type(exc).__name__})
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
