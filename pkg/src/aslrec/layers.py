"""Small building blocks shared by the backbone, attention and head."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised for invalid layer tables or model configuration."""


def hswish(x: torch.Tensor) -> torch.Tensor:
    return x * F.relu6(x + 3.0) / 6.0


def hsigmoid(x: torch.Tensor) -> torch.Tensor:
    return F.relu6(x + 3.0) / 6.0


class HSwish(nn.Module):
    def forward(self, x):
        return hswish(x)


class HSigmoid(nn.Module):
    def forward(self, x):
        return hsigmoid(x)


def make_activation(name: str) -> nn.Module:
    if name == "RE":
        return nn.ReLU()
    if name == "HS":
        return HSwish()
    raise ConfigError(f"unknown nonlinearity {name!r}, expected 'RE' or 'HS'")


def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round a channel count to the nearest multiple of ``divisor`` (halves round up).

    Never goes below ``min_value``, which defaults to ``divisor``.
    """
    if min_value is None:
        min_value = divisor
    return max(min_value, int(value + divisor / 2) // divisor * divisor)


def conv3d(in_ch: int, out_ch: int, kernel=(1, 1, 1), stride=(1, 1, 1), groups: int = 1,
           bias: bool = False) -> nn.Conv3d:
    """3D convolution with symmetric 'same' padding on every axis."""
    padding = tuple(k // 2 for k in kernel)
    return nn.Conv3d(in_ch, out_ch, kernel, stride=stride, padding=padding, groups=groups, bias=bias)


class TemporalAvgPool(nn.Module):
    """Average over non-overlapping (or strided) windows along the time axis."""

    def __init__(self, kernel: int, stride: int):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ConfigError(f"temporal pool needs kernel, stride >= 1, got {kernel}, {stride}")
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return temporal_avg_pool(x, self.kernel, self.stride)


def temporal_avg_pool(x: torch.Tensor, kernel: int, stride: int) -> torch.Tensor:
    """Mean over temporal windows of a (B, C, T, H, W) or (C, T, H, W) tensor.

    Output length is ``floor((T - kernel) / stride) + 1``.
    """
    unbatched = x.dim() == 4
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 5:
        raise ValueError(f"expected (B, C, T, H, W) or (C, T, H, W), got shape {tuple(x.shape)}")
    t = x.shape[2]
    if t < kernel:
        raise ValueError(f"temporal length {t} is shorter than pooling kernel {kernel}")
    if kernel == 1 and stride == 1:
        out = x
    else:
        out = F.avg_pool3d(x, kernel_size=(kernel, 1, 1), stride=(stride, 1, 1))
    return out.squeeze(0) if unbatched else out


class ContinuousDropout(nn.Module):
    """Multiplicative Gaussian noise with mean 1 and variance p / (1 - p).

    Identity outside of training.
    """

    def __init__(self, p: float = 0.1):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout p must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return continuous_dropout(x, self.p, self.training, generator)

    def extra_repr(self) -> str:
        return f"p={self.p}"


def continuous_dropout(x: torch.Tensor, p: float, training: bool,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    std = math.sqrt(p / (1.0 - p))
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return x * (1.0 + std * noise)
