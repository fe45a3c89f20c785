"""Continuous-recognition test protocol and top-1 / mAP metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .data import ClipAnnotation, VideoDataset, crop_and_resize, to_network_input


@dataclass
class MetricsReport:
    top1: float
    mAP: float
    per_class_ap: List[Optional[float]]
    num_samples: int
    balanced_top1: bool = True
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"top1": self.top1, "mAP": self.mAP, "per_class_ap": self.per_class_ap,
                "num_samples": self.num_samples, "balanced_top1": self.balanced_top1,
                "config": self.config}


def central_window_indices(start: int, end: int, length: int) -> np.ndarray:
    """Frame indices of the central ``length``-frame window of ``[start, end)``.

    The window is centred on ``(start + end) // 2``, clipped to the segment, and
    left-padded by repeating its first frame when the segment is too short.
    """
    if end <= start:
        raise ValueError(f"empty segment [{start}, {end})")
    center = (start + end) // 2
    lo = max(center - length // 2, start)
    hi = min(lo + length, end)
    lo = max(hi - length, start)
    idx = np.arange(lo, hi)
    if len(idx) < length:
        idx = np.concatenate([np.full(length - len(idx), idx[0]), idx])
    return idx


def build_eval_sample(ann: ClipAnnotation, frames: np.ndarray, length: int = 16, out_size: int = 224):
    """``(clip (3, T, S, S), label)`` for one annotation, cropped by the mean box of the window."""
    idx = central_window_indices(ann.start, ann.end, length)
    if idx.max() >= len(frames):
        raise ValueError(f"{ann.source}: needs frame {idx.max()} but only {len(frames)} available")
    clip = crop_and_resize(frames[idx], ann.boxes[idx], "mean", out_size)
    return to_network_input(clip), ann.label


def top1(predictions, labels, balanced: bool = True) -> float:
    """Top-1 accuracy; ``balanced`` averages the per-class recall over classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("top-1 of an empty prediction set")
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    correct = predictions == labels
    if not balanced:
        return float(correct.mean())
    return float(np.mean([correct[labels == c].mean() for c in np.unique(labels)]))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean of precision at each positive hit, ranking by score descending (ties by index)."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise ValueError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_ap(scores, labels):
    """``(mAP, per_class_ap)``; classes without positives get ``None`` and are left out of the mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != len(labels) or len(labels) == 0:
        raise ValueError(f"scores {scores.shape} do not match {len(labels)} labels")
    per_class: List[Optional[float]] = []
    missing = []
    for k in range(scores.shape[1]):
        positives = labels == k
        if positives.any():
            per_class.append(average_precision(scores[:, k], positives))
        else:
            per_class.append(None)
            missing.append(k)
    if missing:
        warnings.warn(f"classes without positives excluded from mAP: {missing}", stacklevel=2)
    present = [ap for ap in per_class if ap is not None]
    return float(np.mean(present)), per_class


@torch.no_grad()
def score_clips(model, clips: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    """Cosine scores (N, K) for a stack of preprocessed clips, in inference mode."""
    was_training = model.training
    model.eval()
    try:
        out = []
        for i in range(0, len(clips), batch_size):
            emb, _ = model(clips[i:i + batch_size])
            out.append(model.cosines(emb, use_pr_product=False))
        return torch.cat(out).numpy()
    finally:
        model.train(was_training)


def evaluate(model, dataset: VideoDataset, length: Optional[int] = None, out_size: Optional[int] = None,
             balanced: bool = True, batch_size: int = 16) -> MetricsReport:
    """Run the test protocol over every annotation of ``dataset``."""
    _, length_default, size_default, _ = model.input_shape
    length = length or length_default
    out_size = out_size or size_default
    clips, labels = [], []
    for i, ann in enumerate(dataset.annotations):
        try:
            clip, label = build_eval_sample(ann, dataset.video(i), length, out_size)
        except ValueError as exc:
            raise ValueError(f"sample {i} ({ann.source}): {exc}") from exc
        clips.append(clip)
        labels.append(label)
    scores = score_clips(model, torch.stack(clips), batch_size)
    labels = np.asarray(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m_ap, per_class = mean_ap(scores, labels)
    return MetricsReport(top1=top1(scores.argmax(axis=1), labels, balanced), mAP=m_ap,
                         per_class_ap=per_class, num_samples=len(labels), balanced_top1=balanced,
                         config={"length": length, "out_size": out_size})
