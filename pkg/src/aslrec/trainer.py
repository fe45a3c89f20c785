"""Training loop, learning-rate schedule and checkpoint files."""
from __future__ import annotations

import copy
import json
import logging
import zipfile
from dataclasses import dataclass, field, asdict, fields
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .attention import hard_tv_loss
from .backbone import BackboneConfig
from .data import AugmentConfig, VideoDataset
from .evaluator import evaluate
from .losses import AmSoftmaxParams, LossError, ScaleSchedule, scale_at, total_loss
from .model import SignRecognitionNet, random_unit_rows

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    warmup_epochs: int = 5
    warmup_start_lr: float = 1e-4
    drop_epoch: int = 25
    drop_factor: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_clips: int = 8
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    margin: float = 0.35
    entropy_weight: float = 0.2
    push_margin: float = 0.3
    scale_start: float = 30.0
    scale_end: float = 5.0
    scale_epochs: int = 40
    tv_weight: float = 1.0
    use_pr_product: bool = True
    min_intersection: float = 0.6
    augment: bool = True
    grad_clip_norm: float = 0.0

    def __post_init__(self):
        if not self.warmup_epochs < self.drop_epoch < self.max_epochs:
            raise ValueError("need warmup_epochs < drop_epoch < max_epochs, got "
                             f"{self.warmup_epochs}, {self.drop_epoch}, {self.max_epochs}")
        if self.batch_clips < 2:
            raise ValueError("batch_clips must be at least 2 (push loss and batch norm need pairs)")
        if self.grad_clip_norm < 0:
            raise ValueError(f"grad_clip_norm must be non-negative, got {self.grad_clip_norm}")

    @property
    def scale_schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.scale_start, self.scale_end, self.scale_epochs)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training key(s): {sorted(unknown)}")
        return cls(**doc)


def lr_at(config: TrainConfig, epoch: float) -> float:
    """Linear warm-up, a constant plateau, then one multiplicative drop after ``drop_epoch``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    if epoch <= config.drop_epoch:
        return config.base_lr
    return config.base_lr * config.drop_factor


def init_class_centers(num_classes: int, dim: int = 256, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Random unit rows drawn from an isotropic Gaussian."""
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    return random_unit_rows(num_classes, dim, generator)


def parameter_groups(model: torch.nn.Module, weight_decay: float):
    """Weight decay on convolution kernels only; norms, biases and class centres are exempt."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.dim() <= 1 or name == "centers":
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class FitResult:
    history: List[dict]
    best_epoch: int
    aborted: bool = False
    state: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    chunks = [order[i:i + batch] for i in range(0, n, batch)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def fit(model: SignRecognitionNet, train: VideoDataset, config: TrainConfig,
        val: Optional[VideoDataset] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train ``model`` in place; returns the per-epoch history.

    With a validation set, the weights of the best validation top-1 epoch are
    restored at the end and training stops after ``patience`` epochs without
    improvement.
    """
    rng = np.random.default_rng(config.seed)
    noise = torch.Generator().manual_seed(config.seed)
    _, length, size, _ = model.input_shape
    augment = AugmentConfig() if config.augment else None
    optimizer = torch.optim.SGD(parameter_groups(model, config.weight_decay), lr=config.warmup_start_lr,
                                momentum=config.momentum)
    schedule = config.scale_schedule
    history: List[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    last_good = best_state
    best_top1, best_epoch, stale = -1.0, 0, 0
    aborted = False

    for epoch in range(config.max_epochs):
        lr = lr_at(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        params = AmSoftmaxParams(config.margin, scale_at(schedule, epoch), config.entropy_weight)
        model.train()
        sums: Dict[str, float] = {}
        n_batches = 0
        try:
            for idx in _batches(len(train), config.batch_clips, rng):
                clips, labels = train.training_batch(idx, length, size, rng, augment, config.min_intersection)
                emb, scores = model(clips, noise)
                cos = model.cosines(emb, config.use_pr_product)
                tv = [hard_tv_loss(s) for s in scores]
                loss, parts = total_loss(cos, emb, labels, model.centers, params, tv,
                                         config.push_margin, config.tv_weight)
                if not torch.isfinite(loss):
                    raise LossError(f"total loss is not finite: {loss.item()}")
                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip_norm > 0:
                    # Bounds the occasional gradient spikes of a freshly initialised
                    # backbone under the normalised head; 0 disables clipping.
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
                optimizer.step()
                model.renormalize_centers()
                sums["loss"] = sums.get("loss", 0.0) + loss.item()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v.item()
                n_batches += 1
        except LossError as exc:
            log.error("epoch %d: %s; restoring last good weights", epoch, exc)
            model.load_state_dict(last_good)
            aborted = True
            history.append({"epoch": epoch, "lr": lr, "scale": params.scale, "aborted": str(exc)})
            break

        record = {"epoch": epoch, "lr": lr, "scale": params.scale}
        record.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        last_good = copy.deepcopy(model.state_dict())
        if val is not None:
            report = evaluate(model, val)
            record["val_top1"], record["val_map"] = report.top1, report.mAP
            if report.top1 > best_top1:
                best_top1, best_epoch, stale = report.top1, epoch, 0
                best_state = last_good
            else:
                stale += 1
        else:
            best_epoch, best_state = epoch, last_good
        history.append(record)
        log.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
        if val is not None and stale >= config.patience:
            break

    if val is not None and not aborted:
        model.load_state_dict(best_state)
    return FitResult(history, best_epoch, aborted, copy.deepcopy(model.state_dict()))


# --------------------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


_MANIFEST_KEY = "__manifest__"


def save_checkpoint(model: SignRecognitionNet, path, train_config: Optional[TrainConfig] = None,
                    epoch: int = 0, generator: Optional[torch.Generator] = None, extra: Optional[dict] = None) -> None:
    """Write every state entry as a named array plus a JSON manifest of shapes and configs."""
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    manifest = {
        "format": "aslrec-checkpoint/1",
        "entries": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()},
        "backbone": model.backbone.config.to_document(),
        "num_classes": model.num_classes,
        "embedding_dim": int(model.centers.shape[1]),
        "train_config": asdict(train_config) if train_config is not None else None,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    if generator is not None:
        arrays["__rng_state__"] = generator.get_state().numpy()
    arrays[_MANIFEST_KEY] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    state: Dict[str, torch.Tensor]
    manifest: dict
    rng_state: Optional[torch.Tensor] = None

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.from_document(self.manifest["backbone"])

    def build_model(self) -> SignRecognitionNet:
        model = SignRecognitionNet(self.backbone_config, self.manifest["num_classes"],
                                   self.manifest["embedding_dim"])
        load_state(model, self.state)
        model.eval()
        return model


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if _MANIFEST_KEY not in arrays:
        raise CheckpointError(f"{path}: missing manifest entry")
    manifest = json.loads(arrays.pop(_MANIFEST_KEY).tobytes().decode())
    rng = arrays.pop("__rng_state__", None)
    expected = set(manifest.get("entries", {}))
    missing, unexpected = sorted(expected - set(arrays)), sorted(set(arrays) - expected)
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing entries {missing}, unexpected entries {unexpected}")
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    return Checkpoint(state, manifest, None if rng is None else torch.from_numpy(rng))


def load_state(model: torch.nn.Module, state: Dict[str, torch.Tensor]) -> None:
    """Strict load with errors that name the offending entries."""
    own = model.state_dict()
    unknown = sorted(set(state) - set(own))
    missing = sorted(set(own) - set(state))
    if unknown or missing:
        raise CheckpointError(f"unknown entries {unknown}, missing entries {missing}")
    for name, tensor in own.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {tuple(state[name].shape)}, "
                                  f"model {tuple(tensor.shape)}")
    model.load_state_dict(state)
