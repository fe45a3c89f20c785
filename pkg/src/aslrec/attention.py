"""Residual spatio-temporal attention with Gumbel-sigmoid masks and hard TV loss."""
from __future__ import annotations

import itertools
import struct
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import conv3d, hswish

Offset = Tuple[int, int, int]


def cube_neighborhood(radius: int = 1) -> frozenset:
    """All offsets of the (2r+1)^3 cube except the centre (26-connected for r=1)."""
    rng = range(-radius, radius + 1)
    return frozenset(o for o in itertools.product(rng, rng, rng) if o != (0, 0, 0))


DEFAULT_NEIGHBORHOOD = cube_neighborhood(1)


def _check_neighborhood(offsets: Iterable[Offset]) -> frozenset:
    offsets = frozenset(tuple(int(v) for v in o) for o in offsets)
    if (0, 0, 0) in offsets:
        raise ValueError("neighbourhood must not contain the centre offset (0, 0, 0)")
    for o in offsets:
        if (-o[0], -o[1], -o[2]) not in offsets:
            raise ValueError(f"neighbourhood is not symmetric: {o} present without its negation")
    if not offsets:
        raise ValueError("neighbourhood is empty")
    return offsets


def _neighbor_kernel(offsets: frozenset, dtype, device) -> Tuple[torch.Tensor, Tuple[int, int, int]]:
    radius = [max(abs(o[d]) for o in offsets) for d in range(3)]
    kernel = torch.zeros(1, 1, *(2 * r + 1 for r in radius), dtype=dtype, device=device)
    for dt, di, dj in offsets:
        kernel[0, 0, dt + radius[0], di + radius[1], dj + radius[2]] = 1.0
    return kernel, tuple(radius)


def neighbor_mean(scores: torch.Tensor, neighborhood: Iterable[Offset] = DEFAULT_NEIGHBORHOOD) -> torch.Tensor:
    """Mean of each position's in-bounds neighbours for maps shaped (..., T, M, N).

    Neighbours falling outside the map are dropped, so border positions average
    over fewer values. Raises if some position has no in-bounds neighbour.
    """
    offsets = _check_neighborhood(neighborhood)
    shape = scores.shape
    if len(shape) < 3:
        raise ValueError(f"expected scores of shape (..., T, M, N), got {tuple(shape)}")
    flat = scores.reshape(-1, 1, *shape[-3:])
    kernel, pad = _neighbor_kernel(offsets, scores.dtype, scores.device)
    sums = F.conv3d(flat, kernel, padding=pad)
    counts = F.conv3d(torch.ones_like(flat[:1]), kernel, padding=pad)
    if bool((counts == 0).any()):
        raise ValueError(
            f"degenerate score map of shape {tuple(shape[-3:])}: some positions have no neighbours")
    return (sums / counts).reshape(shape)


def hard_tv_loss(scores: torch.Tensor, neighborhood: Iterable[Offset] = DEFAULT_NEIGHBORHOOD) -> torch.Tensor:
    """Hard-target total variation over confidence maps in [0, 1].

    Each confidence is pulled towards 1 if the mean of its neighbours exceeds
    0.5 (strictly) and towards 0 otherwise. The binarised target is a constant
    for autograd. Works on (T, M, N) or batched (B, T, M, N) maps; the result is
    the mean over every position.
    """
    with torch.no_grad():
        target = (neighbor_mean(scores.detach(), neighborhood) > 0.5).to(scores.dtype)
    return (scores - target).abs().mean()


def gumbel_sigmoid(logits: torch.Tensor, temperature: float = 1.0, training: bool = True,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Relaxed Bernoulli sample ``sigmoid((l + g1 - g2) / tau)``; plain sigmoid at inference."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not training:
        return torch.sigmoid(logits)
    eps = torch.finfo(logits.dtype).tiny
    u = torch.rand((2,) + tuple(logits.shape), generator=generator, dtype=logits.dtype,
                   device=logits.device)
    g = -torch.log((-torch.log(u.clamp_min(eps))).clamp_min(eps))
    return torch.sigmoid((logits + g[0] - g[1]) / temperature)


def apply_residual_attention(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``x * (1 + mask)`` with the (T, M, N) mask broadcast over channels.

    ``x`` is (C, T, M, N) with mask (T, M, N), or batched (B, C, T, M, N) with
    mask (B, T, M, N).
    """
    if x.shape[-3:] != mask.shape[-3:] or x.dim() != mask.dim() + 1:
        raise ValueError(
            f"attention mask shape {tuple(mask.shape)} does not match features {tuple(x.shape)}")
    return x * (1.0 + mask.unsqueeze(-4))


class ResidualSpatioTemporalAttention(nn.Module):
    """Two-branch attention: a spatial and a temporal stream summed into one logit map.

    spatial:  depth-wise 1 x k x k -> BN -> H-Swish -> 1x1x1 conv to one channel
    temporal: spatial mean -> depth-wise t x 1 x 1 -> BN -> H-Swish -> 1x1x1 conv to one channel

    During training the mask is a Gumbel-sigmoid sample; at inference it is the
    sigmoid of the logits. ``forward`` returns the re-weighted features and the
    confidence map ``sigmoid(logits)`` the TV loss is computed on.
    """

    def __init__(self, channels: int, spatial_kernel: int = 3, temporal_kernel: int = 3,
                 temperature: float = 1.0):
        super().__init__()
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.channels = channels
        self.temperature = temperature
        self.spatial_dw = conv3d(channels, channels, (1, spatial_kernel, spatial_kernel), groups=channels)
        self.spatial_bn = nn.BatchNorm3d(channels)
        self.spatial_out = conv3d(channels, 1, bias=True)
        self.temporal_dw = conv3d(channels, channels, (temporal_kernel, 1, 1), groups=channels)
        self.temporal_bn = nn.BatchNorm3d(channels)
        self.temporal_out = conv3d(channels, 1, bias=True)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, T, M, N) -> (B, T, M, N)."""
        s = self.spatial_out(hswish(self.spatial_bn(self.spatial_dw(x))))
        pooled = x.mean(dim=(3, 4), keepdim=True)
        t = self.temporal_out(hswish(self.temporal_bn(self.temporal_dw(pooled))))
        return (s + t).squeeze(1)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        logits = self.logits(x)
        mask = gumbel_sigmoid(logits, self.temperature, self.training, generator)
        return apply_residual_attention(x, mask), torch.sigmoid(logits)


def attention_logits(block: ResidualSpatioTemporalAttention, x: torch.Tensor) -> torch.Tensor:
    """Logit map for a single (C, T, M, N) feature map or a batch."""
    if x.dim() == 4:
        return block.logits(x.unsqueeze(0)).squeeze(0)
    return block.logits(x)


_HEADER = struct.Struct("<3i")


def write_mask_dump(path, scores) -> None:
    """Write a (T, M, N) score map: three little-endian int32 dims, then float32 values."""
    arr = np.asarray(scores.detach().cpu() if torch.is_tensor(scores) else scores, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"mask dump expects a (T, M, N) map, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_mask_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated mask dump header")
    dims = _HEADER.unpack_from(data)
    count = int(np.prod(dims))
    if len(data) != _HEADER.size + 4 * count:
        raise ValueError(f"{path}: expected {count} float32 values for shape {dims}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(dims).copy()
