"""Embedding head and metric-learning objective.

All losses work in cosine space: embeddings and class centres are unit
vectors, and the classifier is a (PR-)product between the two.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import conv3d


class LossError(FloatingPointError):
    """A loss component evaluated to NaN or infinity."""


class EmbeddingHead(nn.Module):
    """Global average pool -> 1x1x1 conv -> BN -> L2 normalisation."""

    def __init__(self, in_channels: int = 960, embedding_dim: int = 256):
        super().__init__()
        self.proj = conv3d(in_channels, embedding_dim)
        self.bn = nn.BatchNorm1d(embedding_dim)
        nn.init.kaiming_normal_(self.proj.weight, mode="fan_out")

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        pooled = features.mean(dim=(2, 3, 4), keepdim=True)
        z = self.bn(self.proj(pooled).flatten(1))
        norm = z.norm(dim=1, keepdim=True)
        if not z.is_meta and bool((norm < 1e-12).any()):
            raise ValueError("embedding is the zero vector before normalisation")
        return z / norm


def embed_head(head: EmbeddingHead, features: torch.Tensor, training: bool = False) -> torch.Tensor:
    """Embed a single (C, T, H, W) map or a batch; restores the head's mode."""
    was_training = head.training
    head.train(training)
    try:
        if features.dim() == 4:
            return head(features.unsqueeze(0)).squeeze(0)
        return head(features)
    finally:
        head.train(was_training)


def pr_product(embeddings: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Cosine logits whose gradient is gated by |sin| of the angle to each centre.

    Forward value is the plain product ``embeddings @ centers.T``. The backward
    signal is scaled by ``|sin(theta)|`` (held constant), so it vanishes as an
    embedding aligns with, or opposes, a centre.
    """
    cos = embeddings @ centers.t()
    sin = torch.sqrt((1.0 - cos.detach() ** 2).clamp_min(0.0))
    return sin * cos + (1.0 - sin) * cos.detach()


@dataclass
class ScaleSchedule:
    start: float = 30.0
    end: float = 5.0
    duration_epochs: int = 40

    def __post_init__(self):
        if not self.start > self.end > 0:
            raise ValueError(f"scale schedule needs start > end > 0, got {self.start}, {self.end}")
        if self.duration_epochs <= 0:
            raise ValueError("scale schedule duration must be positive")


def scale_at(schedule: ScaleSchedule, epoch: float) -> float:
    """Linear descent from ``start`` to ``end`` over ``duration_epochs``, then constant."""
    frac = min(max(epoch / schedule.duration_epochs, 0.0), 1.0)
    return schedule.start + (schedule.end - schedule.start) * frac


@dataclass
class AmSoftmaxParams:
    margin: float = 0.35
    scale: float = 30.0
    entropy_weight: float = 0.2

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin must lie in [0, 1), got {self.margin}")
        if self.entropy_weight < 0:
            raise ValueError(f"entropy weight must be non-negative, got {self.entropy_weight}")


def am_softmax_entropy_loss(cosines: torch.Tensor, labels, params: AmSoftmaxParams,
                            reduction: str = "mean") -> torch.Tensor:
    """``max(0, CE(p) - alpha * H(p))`` with p the additive-margin softmax.

    ``cosines`` is (K,) with an int label or (B, K) with a label vector.
    """
    single = cosines.dim() == 1
    if single:
        cosines = cosines.unsqueeze(0)
    labels = torch.as_tensor(labels, device=cosines.device).reshape(-1).long()
    k = cosines.shape[1]
    if k < 2:
        raise ValueError(f"AM-Softmax needs at least two classes, got {k}")
    one_hot = F.one_hot(labels, k).to(cosines.dtype)
    logits = params.scale * (cosines - params.margin * one_hot)
    log_p = F.log_softmax(logits, dim=1)
    cross = -(log_p * one_hot).sum(dim=1)
    entropy = -(log_p.exp() * log_p).sum(dim=1)
    loss = F.relu(cross - params.entropy_weight * entropy)
    if reduction == "none":
        return loss[0] if single else loss
    if reduction == "mean":
        return loss.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def _pair_hinge(vectors: torch.Tensor, pair_mask: torch.Tensor, margin: float) -> torch.Tensor:
    unit = F.normalize(vectors, dim=1)
    cos = unit @ unit.t()
    mask = torch.triu(pair_mask, diagonal=1)
    n_pairs = int(mask.sum())
    if n_pairs == 0:
        return vectors.sum() * 0.0
    hinge = F.relu(cos - (1.0 - margin))
    return (hinge * mask).sum() / n_pairs


def push_loss(embeddings: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    """Mean cosine hinge ``[cos - (1 - margin)]_+`` over all cross-class pairs in a batch."""
    if embeddings.shape[0] < 2:
        raise ValueError("push loss needs a batch of at least two embeddings")
    labels = torch.as_tensor(labels, device=embeddings.device).reshape(-1)
    different = labels[:, None] != labels[None, :]
    return _pair_hinge(embeddings, different.to(embeddings.dtype), margin)


def center_push_loss(centers: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Mean cosine hinge over every unordered pair of class centres."""
    k = centers.shape[0]
    if k < 2:
        raise ValueError(f"centre push needs at least two centres, got {k}")
    ones = torch.ones(k, k, dtype=centers.dtype, device=centers.device)
    return _pair_hinge(centers, ones, margin)


def total_loss(cosines: torch.Tensor, embeddings: torch.Tensor, labels, centers: torch.Tensor,
               params: AmSoftmaxParams, tv_terms: Iterable[torch.Tensor] = (),
               push_margin: float = 0.3, tv_weight: float = 1.0):
    """Sum of AM-Softmax, push, centre push and attention TV terms.

    Returns ``(total, components)`` where ``components`` maps each term's name
    to its (graph-attached) value.
    """
    parts: Dict[str, torch.Tensor] = {
        "am": am_softmax_entropy_loss(cosines, labels, params),
        "push": push_loss(embeddings, labels, push_margin),
        "cpush": center_push_loss(centers, push_margin),
    }
    tv_terms = list(tv_terms)
    if tv_terms:
        parts["tv"] = tv_weight * torch.stack([t.reshape(()) for t in tv_terms]).sum()
    for name, value in parts.items():
        if not bool(torch.isfinite(value).all()):
            raise LossError(f"loss component {name!r} is not finite: {value.item()}")
    return sum(parts.values()), parts

