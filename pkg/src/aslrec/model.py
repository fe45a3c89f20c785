"""Full recognition network: S3D MobileNet-V3 backbone, embedding head and class centres."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, S3DMobileNetV3, default_backbone_config
from .losses import EmbeddingHead, pr_product


class SignRecognitionNet(nn.Module):
    def __init__(self, backbone_config: Optional[BackboneConfig] = None, num_classes: int = 100,
                 embedding_dim: int = 256, generator: Optional[torch.Generator] = None):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need at least two classes, got {num_classes}")
        self.backbone = S3DMobileNetV3(backbone_config or default_backbone_config())
        self.head = EmbeddingHead(self.backbone.out_channels, embedding_dim)
        self.centers = nn.Parameter(random_unit_rows(num_classes, embedding_dim, generator))

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def input_shape(self):
        return self.backbone.input_shape

    def forward(self, clip: torch.Tensor, generator: Optional[torch.Generator] = None):
        """``(embeddings, attention_scores)`` for a (B, 3, T, H, W) clip batch."""
        features, scores = self.backbone(clip, generator)
        return self.head(features), scores

    def cosines(self, embeddings: torch.Tensor, use_pr_product: bool = True) -> torch.Tensor:
        if use_pr_product:
            return pr_product(embeddings, self.centers)
        return embeddings @ self.centers.t()

    @torch.no_grad()
    def renormalize_centers(self) -> None:
        self.centers.copy_(F.normalize(self.centers, dim=1))

    @torch.no_grad()
    def reset_centers(self, num_classes: int, generator: Optional[torch.Generator] = None) -> None:
        """Replace the centre matrix with fresh random unit rows for a new label set."""
        self.centers = nn.Parameter(random_unit_rows(num_classes, self.centers.shape[1], generator))


def random_unit_rows(k: int, dim: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    rows = torch.randn(k, dim, generator=generator)
    return F.normalize(rows, dim=1)
