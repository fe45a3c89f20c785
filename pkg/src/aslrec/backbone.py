"""S3D MobileNet-V3 video backbone built from a declarative layer table.

The table mirrors the MobileNet-V3-Large layout extended with temporal
columns: every bottleneck is expand (1x1x1) -> depth-wise (1xkxk) ->
project (tx1x1), temporal down-sampling is done by average pooling, and two
``attention`` rows mark where residual spatio-temporal attention is inserted.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import yaml

from .attention import ResidualSpatioTemporalAttention
from .layers import (ConfigError, ContinuousDropout, HSigmoid, TemporalAvgPool, conv3d,
                     make_activation, make_divisible)

OP_KINDS = ("conv3d", "bneck", "attention")

# Column names of the layer table document, in order.
COLUMNS = {
    "op_kind": "Operator",
    "spatial_kernel": "Sp. kernel",
    "temporal_kernel": "Temp. kernel",
    "expand_size": "Exp size",
    "out_channels": "Num out",
    "use_se": "SE",
    "nonlinearity": "NL",
    "spatial_stride": "Sp. stride",
    "temporal_stride": "Temp. stride",
    "use_dropout": "Dropout",
}
SIZE_COLUMNS = ("Sp. size", "Temp. size")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LayerSpec:
    op_kind: str
    spatial_kernel: int
    temporal_kernel: int
    expand_size: Optional[int]
    out_channels: int
    use_se: bool = False
    nonlinearity: Optional[str] = None
    spatial_stride: int = 1
    temporal_stride: int = 1
    use_dropout: bool = False

    def validate(self) -> None:
        if self.op_kind not in OP_KINDS:
            raise ConfigError(f"unknown operator {self.op_kind!r}, expected one of {OP_KINDS}")
        for name in ("spatial_stride", "temporal_stride"):
            if getattr(self, name) not in (1, 2):
                raise ConfigError(f"{self.op_kind}: {name} must be 1 or 2, got {getattr(self, name)}")
        for name in ("spatial_kernel", "temporal_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{self.op_kind}: {name} must be odd and >= 1, got {k}")
        if (self.expand_size is not None) != (self.op_kind == "bneck"):
            raise ConfigError(f"{self.op_kind}: 'Exp size' must be given exactly for bneck rows")
        if self.op_kind != "attention" and self.nonlinearity not in ("RE", "HS"):
            raise ConfigError(f"{self.op_kind}: nonlinearity must be 'RE' or 'HS', got {self.nonlinearity!r}")
        if self.op_kind == "attention" and (self.spatial_stride, self.temporal_stride) != (1, 1):
            raise ConfigError("attention rows cannot change the feature map size")
        if self.out_channels < 1:
            raise ConfigError(f"{self.op_kind}: 'Num out' must be positive")

    @classmethod
    def from_record(cls, record: dict) -> "LayerSpec":
        allowed = set(COLUMNS.values()) | set(SIZE_COLUMNS)
        unknown = set(record) - allowed
        if unknown:
            raise ConfigError(f"unknown layer column(s): {sorted(unknown)}")
        missing = [c for c in COLUMNS.values() if c not in record]
        if missing:
            raise ConfigError(f"layer record missing column(s): {missing}")
        spec = cls(**{attr: record[col] for attr, col in COLUMNS.items()})
        spec.validate()
        return spec

    def to_record(self) -> dict:
        return {col: getattr(self, attr) for attr, col in COLUMNS.items()}


@dataclass
class BackboneConfig:
    layers: List[LayerSpec]
    input_spatial: int = 224
    input_temporal: int = 16
    width_multiplier: float = 1.0
    dropout_p: float = 0.1
    temporal_pool_kernel: int = 2
    attention_temperature: float = 1.0
    se_reduction: int = 6
    input_mean: Tuple[float, float, float] = IMAGENET_MEAN
    input_std: Tuple[float, float, float] = IMAGENET_STD
    # Expected (spatial, temporal) input size per row, when read from a table document.
    expected_sizes: Optional[List[Tuple[int, int]]] = field(default=None, repr=False)

    def validate(self) -> None:
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if not self.layers:
            raise ConfigError("layer table is empty")
        if self.layers[0].op_kind != "conv3d":
            raise ConfigError("the first layer must be the conv3d stem")
        for layer in self.layers:
            layer.validate()
        spatial, temporal = self.input_spatial, self.input_temporal
        for i, layer in enumerate(self.layers):
            if spatial % layer.spatial_stride:
                raise ConfigError(f"row {i}: spatial size {spatial} not divisible by stride {layer.spatial_stride}")
            if layer.temporal_stride == 2 and temporal < self.temporal_pool_kernel:
                raise ConfigError(f"row {i}: temporal size {temporal} too short for pooling")
            spatial //= layer.spatial_stride
            temporal = (temporal - self.temporal_pool_kernel) // 2 + 1 if layer.temporal_stride == 2 else temporal

    def to_document(self) -> dict:
        doc = {k: v for k, v in asdict(self).items() if k not in ("layers", "expected_sizes")}
        doc["input_mean"] = list(self.input_mean)
        doc["input_std"] = list(self.input_std)
        doc["layers"] = [layer.to_record() for layer in self.layers]
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> "BackboneConfig":
        doc = dict(doc)
        records = doc.pop("layers", None)
        if records is None:
            raise ConfigError("backbone document has no 'layers' list")
        known = {f for f in cls.__dataclass_fields__ if f not in ("layers", "expected_sizes")}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown backbone key(s): {sorted(unknown)}")
        sizes = None
        if all(all(c in r for c in SIZE_COLUMNS) for r in records):
            sizes = [(r["Sp. size"], r["Temp. size"]) for r in records]
        for key in ("input_mean", "input_std"):
            if key in doc:
                doc[key] = tuple(float(v) for v in doc[key])
        cfg = cls(layers=[LayerSpec.from_record(r) for r in records], expected_sizes=sizes, **doc)
        cfg.validate()
        return cfg


def default_table_path() -> Path:
    return Path(str(resources.files("aslrec") / "configs" / "s3d_mobilenetv3_large.yaml"))


def load_backbone_config(path=None, **overrides) -> BackboneConfig:
    """Read a layer-table document; defaults to the shipped MobileNet-V3-Large table."""
    path = default_table_path() if path is None else Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    doc.update(overrides)
    return BackboneConfig.from_document(doc)


def default_backbone_config(**overrides) -> BackboneConfig:
    return load_backbone_config(None, **overrides)


def save_backbone_config(cfg: BackboneConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_document(), fh, sort_keys=False)


class SqueezeExcite3d(nn.Module):
    """Squeeze-excite whose squeeze pools only over space, giving one gate per frame."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = make_divisible(channels / reduction)
        self.reduce = conv3d(channels, hidden, bias=True)
        self.act = nn.ReLU()
        self.expand = conv3d(hidden, channels, bias=True)
        self.gate_act = HSigmoid()

    def squeeze(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(-2, -1), keepdim=True)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return self.gate_act(self.expand(self.act(self.reduce(self.squeeze(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


def se_gate(block: SqueezeExcite3d, x: torch.Tensor) -> torch.Tensor:
    """Apply ``block`` to a (C, T, H, W) map or a batch of them."""
    if x.dim() == 4:
        return block(x.unsqueeze(0)).squeeze(0)
    return block(x)


class ConvBNAct(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1), groups=1, act: Optional[str] = None):
        super().__init__()
        self.conv = conv3d(in_ch, out_ch, kernel, stride, groups=groups)
        self.bn = nn.BatchNorm3d(out_ch)
        self.act = make_activation(act) if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck3d(nn.Module):
    """Separable 3D inverted residual: 1x1x1 expand, 1xkxk depth-wise, tx1x1 project."""

    def __init__(self, in_ch: int, spec: LayerSpec, expand: int, out_ch: int,
                 dropout_p: float = 0.1, pool_kernel: int = 2, se_reduction: int = 4):
        super().__init__()
        self.in_channels = in_ch
        self.out_channels = out_ch
        k, t = spec.spatial_kernel, spec.temporal_kernel
        self.expand = ConvBNAct(in_ch, expand, (1, 1, 1), act=spec.nonlinearity) if expand != in_ch else None
        self.depthwise = ConvBNAct(expand, expand, (1, k, k), (1, spec.spatial_stride, spec.spatial_stride),
                                   groups=expand, act=spec.nonlinearity)
        self.se = SqueezeExcite3d(expand, se_reduction) if spec.use_se else None
        self.project = ConvBNAct(expand, out_ch, (t, 1, 1))
        self.dropout = ContinuousDropout(dropout_p) if spec.use_dropout else None
        self.pool = TemporalAvgPool(pool_kernel, 2) if spec.temporal_stride == 2 else None
        self.use_residual = in_ch == out_ch and spec.spatial_stride == 1 and spec.temporal_stride == 1

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"bottleneck expects {self.in_channels} input channels, got {x.shape[1]}")
        out = self.expand(x) if self.expand is not None else x
        out = self.depthwise(out)
        if self.se is not None:
            out = self.se(out)
        out = self.project(out)
        if self.dropout is not None:
            out = self.dropout(out, generator)
        if self.pool is not None:
            out = self.pool(out)
        if self.use_residual:
            out = out + x
        return out


def bottleneck_forward(block: Bottleneck3d, x: torch.Tensor, training: bool = False,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Run one bottleneck on a (C, T, H, W) map or a batch, in the requested mode."""
    was_training = block.training
    block.train(training)
    try:
        if x.dim() == 4:
            return block(x.unsqueeze(0), generator).squeeze(0)
        return block(x, generator)
    finally:
        block.train(was_training)


class S3DMobileNetV3(nn.Module):
    """Backbone mapping a (B, 3, T, H, W) clip in [0, 1] to a (B, C, T/4, H/32, W/32) feature map."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = copy.deepcopy(config)
        w = config.width_multiplier
        self.register_buffer("input_mean", torch.tensor(config.input_mean).view(1, 3, 1, 1, 1))
        self.register_buffer("input_std", torch.tensor(config.input_std).view(1, 3, 1, 1, 1))

        blocks, kinds = [], []
        in_ch = 3
        for spec in config.layers:
            if spec.op_kind == "conv3d":
                out_ch = make_divisible(spec.out_channels * w)
                k, t, s = spec.spatial_kernel, spec.temporal_kernel, spec.spatial_stride
                block = ConvBNAct(in_ch, out_ch, (t, k, k), (1, s, s), act=spec.nonlinearity)
                if spec.temporal_stride == 2:
                    block = nn.Sequential(block, TemporalAvgPool(config.temporal_pool_kernel, 2))
            elif spec.op_kind == "bneck":
                out_ch = make_divisible(spec.out_channels * w)
                block = Bottleneck3d(in_ch, spec, make_divisible(spec.expand_size * w), out_ch,
                                     config.dropout_p, config.temporal_pool_kernel, config.se_reduction)
            else:
                out_ch = in_ch
                block = ResidualSpatioTemporalAttention(in_ch, spec.spatial_kernel, spec.temporal_kernel,
                                                        config.attention_temperature)
            blocks.append(block)
            kinds.append(spec.op_kind)
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.kinds = kinds
        self.out_channels = in_ch
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # Residual branches start as identities, which lets the thin desk-scale
        # variants train from scratch.
        for block in self.blocks:
            if isinstance(block, Bottleneck3d) and block.use_residual:
                nn.init.zeros_(block.project.bn.weight)

    @property
    def attention_positions(self) -> List[int]:
        """Zero-based index of the bottleneck each attention block follows."""
        positions, n_bneck = [], 0
        for kind in self.kinds:
            if kind == "bneck":
                n_bneck += 1
            elif kind == "attention":
                positions.append(n_bneck - 1)
        return positions

    @property
    def input_shape(self) -> Tuple[int, int, int, int]:
        c = self.config
        return (3, c.input_temporal, c.input_spatial, c.input_spatial)

    def check_input(self, clip: torch.Tensor) -> None:
        if clip.dim() != 5 or tuple(clip.shape[1:]) != self.input_shape:
            raise ValueError(
                f"expected clip of shape (B, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(clip.shape)}")

    def normalize(self, clip: torch.Tensor) -> torch.Tensor:
        return (clip - self.input_mean) / self.input_std

    def forward(self, clip: torch.Tensor, generator: Optional[torch.Generator] = None):
        """Return ``(features, scores)`` where ``scores`` lists each attention block's confidence map."""
        self.check_input(clip)
        x = self.normalize(clip)
        scores = []
        for kind, block in zip(self.kinds, self.blocks):
            if kind == "bneck":
                x = block(x, generator)
            elif kind == "attention":
                x, s = block(x, generator)
                scores.append(s)
            else:
                x = block(x)
        return x, scores

    def trace_shapes(self, clip: torch.Tensor) -> List[Tuple[str, tuple, tuple]]:
        """Per-row (op_kind, input shape, output shape) for one forward pass, batch dim dropped."""
        self.check_input(clip)
        trace = []
        x = self.normalize(clip)
        with torch.no_grad():
            for kind, block in zip(self.kinds, self.blocks):
                before = tuple(x.shape[1:])
                x = block(x)[0] if kind == "attention" else block(x)
                trace.append((kind, before, tuple(x.shape[1:])))
        return trace


def build_backbone(config: Optional[BackboneConfig] = None) -> S3DMobileNetV3:
    return S3DMobileNetV3(config if config is not None else default_backbone_config())


def backbone_forward(model: S3DMobileNetV3, clip: torch.Tensor, training: bool = False,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Features for a (3, T, H, W) clip or a batch; the mode is restored afterwards."""
    was_training = model.training
    model.train(training)
    try:
        if clip.dim() == 4:
            return model(clip.unsqueeze(0), generator)[0].squeeze(0)
        return model(clip, generator)[0]
    finally:
        model.train(was_training)


def model_stats(model: nn.Module, input_shape: Optional[tuple] = None) -> dict:
    """Trainable parameter count and forward FLOPs (2 x convolution/linear MACs).

    Nonlinearities, pooling and normalisation are not counted. The forward pass
    runs on the meta device, so no real compute happens.
    """
    params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    if input_shape is None:
        input_shape = (1,) + tuple(model.input_shape)
    macs = 0

    def hook(module, inputs, output):
        nonlocal macs
        if isinstance(module, nn.Conv3d):
            per_out = (module.in_channels // module.groups) * module.weight[0, 0].numel()
            macs += output.numel() // output.shape[0] * per_out
        elif isinstance(module, nn.Linear):
            macs += output.numel() // output.shape[0] * module.in_features

    meta = copy.deepcopy(model).to("meta").eval()
    handles = [m.register_forward_hook(hook) for m in meta.modules() if isinstance(m, (nn.Conv3d, nn.Linear))]
    try:
        with torch.no_grad():
            meta(torch.empty(input_shape, device="meta"))
    finally:
        for h in handles:
            h.remove()
    return {"params": params, "flops": 2 * macs}
