"""Composite blocks: residual multi-scale block, squeeze-and-excitation, downsampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GeometryError, ShapeError
from .layers import (BatchNorm, Conv2D, Dense, DepthwiseConv2D, GlobalAvgPool, Layer,
                     LayerRow, ReLU, Sequential, Sigmoid, conv_bn_relu)
from .tensor import DEFAULT_DTYPE


@dataclass(frozen=True)
class RmsbConfig:
    """Shape and structure of one residual multi-scale block.

    ``branch_channels`` is the width of the 1x1 pointwise branch. With
    ``use_depthwise`` off, the 3x3/5x5 branches become standard convolutions
    producing ``standard_channels`` maps each (``in_channels`` when None).
    """

    in_channels: int
    out_channels: int
    branch_channels: Optional[int] = None
    use_residual: bool = True
    use_depthwise: bool = True
    standard_channels: Optional[int] = None
    branch_bn: bool = True
    branch_act: bool = True
    shortcut_bn: bool = True
    conv_bias: bool = False

    @property
    def pointwise_width(self) -> int:
        return self.branch_channels if self.branch_channels is not None else self.in_channels

    @property
    def multiscale_width(self) -> int:
        if self.use_depthwise or self.standard_channels is None:
            return self.in_channels
        return self.standard_channels

    @property
    def concat_width(self) -> int:
        return 2 * self.multiscale_width + self.pointwise_width


@dataclass(frozen=True)
class SeConfig:
    channels: int
    reduction: int = 8
    use_bias: bool = True

    @property
    def hidden(self) -> int:
        return max(self.channels // self.reduction, 1)


class ResidualMultiScaleBlock(Layer):
    """relu(bn(proj(concat(dw3(x), dw5(x), pw(x)))) + shortcut(x))."""

    kind = "rmsb"

    def __init__(self, name, cfg: RmsbConfig, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.cfg = cfg
        cin, cout = cfg.in_channels, cfg.out_channels
        bias = cfg.conv_bias
        ms = cfg.multiscale_width

        def multiscale(k):
            if cfg.use_depthwise:
                conv = DepthwiseConv2D("dwconv", cin, k, use_bias=bias, dtype=dtype)
            else:
                conv = Conv2D("conv", cin, ms, k, use_bias=bias, dtype=dtype)
            return conv_bn_relu(f"branch{k}x{k}", conv, ms, cfg.branch_bn, cfg.branch_act, dtype)

        pw = cfg.pointwise_width
        self.branches = [
            multiscale(3),
            multiscale(5),
            conv_bn_relu("branch1x1", Conv2D("conv", cin, pw, 1, use_bias=bias, dtype=dtype),
                         pw, cfg.branch_bn, cfg.branch_act, dtype),
        ]
        self.project = Conv2D("project", cfg.concat_width, cout, 1, use_bias=bias, dtype=dtype)
        self.project_bn = BatchNorm("project_bn", cout, dtype=dtype)
        self.shortcut = None
        if cfg.use_residual and cin != cout:
            conv = Conv2D("conv", cin, cout, 1, use_bias=bias, dtype=dtype)
            self.shortcut = conv_bn_relu("shortcut", conv, cout, cfg.shortcut_bn, False, dtype)
        self.out_relu = ReLU("relu")

    def children(self):
        kids = self.branches + [self.project, self.project_bn]
        if self.shortcut is not None:
            kids.append(self.shortcut)
        return kids + [self.out_relu]

    def param_count(self):
        return sum(k.param_count() for k in self.children())

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.cfg.out_channels)

    def profile(self, in_shape, prefix=""):
        p = prefix + self.name + "."
        h, w, _ = in_shape
        rows = []
        for branch in self.branches:
            rows += branch.profile(in_shape, p)
        cat = (h, w, self.cfg.concat_width)
        rows.append(LayerRow(p + "concat", "concat", cat, 0))
        rows += self.project.profile(cat, p)
        out = (h, w, self.cfg.out_channels)
        rows += self.project_bn.profile(out, p)
        if self.shortcut is not None:
            rows += self.shortcut.profile(in_shape, p)
        if self.cfg.use_residual:
            rows.append(LayerRow(p + "add", "add", out, 0, 0, math.prod(out)))
        rows += self.out_relu.profile(out, p)
        return rows

    def forward(self, x, training=False):
        if x.shape[-1] != self.cfg.in_channels:
            raise ShapeError(f"{self.name}: input has {x.shape[-1]} channels, "
                             f"expected {self.cfg.in_channels}")
        parts = [b.forward(x, training) for b in self.branches]
        self._widths = [p.shape[-1] for p in parts]
        z = self.project_bn.forward(self.project.forward(np.concatenate(parts, axis=-1), training),
                                    training)
        if self.cfg.use_residual:
            z = z + (self.shortcut.forward(x, training) if self.shortcut is not None else x)
        return self.out_relu.forward(z, training)

    def backward(self, dy):
        dz = self.out_relu.backward(dy)
        dcat = self.project.backward(self.project_bn.backward(dz))
        splits = np.cumsum(self._widths)[:-1]
        dx = None
        for branch, dpart in zip(self.branches, np.split(dcat, splits, axis=-1)):
            d = branch.backward(dpart)
            dx = d if dx is None else dx + d
        if self.cfg.use_residual:
            dx = dx + (self.shortcut.backward(dz) if self.shortcut is not None else dz)
        return dx


def rmsb_forward(x, block: ResidualMultiScaleBlock, mode="infer"):
    return block.forward(x, training=(mode == "train"))


class SqueezeExcitation(Layer):
    """Channel attention: global pool, bottleneck MLP, sigmoid gate, reweight."""

    kind = "se"

    def __init__(self, name, cfg: SeConfig, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.cfg = cfg
        c, h = cfg.channels, cfg.hidden
        self.pool = GlobalAvgPool("squeeze")
        self.excite = Sequential("excite", [
            Dense("fc1", c, h, use_bias=cfg.use_bias, dtype=dtype),
            ReLU("relu"),
            Dense("fc2", h, c, use_bias=cfg.use_bias, dtype=dtype),
            Sigmoid("sigmoid"),
        ])

    def children(self):
        return [self.pool, self.excite]

    def param_count(self):
        return self.excite.param_count()

    def profile(self, in_shape, prefix=""):
        p = prefix + self.name + "."
        rows = self.pool.profile(in_shape, p)
        rows += self.excite.profile((in_shape[-1],), p)
        rows.append(LayerRow(p + "reweight", "multiply", tuple(in_shape), 0, 0,
                             math.prod(in_shape)))
        return rows

    def squeeze(self, x):
        return self.pool.forward(x)

    def attention(self, x, training=False):
        if x.shape[-1] != self.cfg.channels:
            raise ShapeError(f"{self.name}: input has {x.shape[-1]} channels, "
                             f"expected {self.cfg.channels}")
        return self.excite.forward(self.pool.forward(x), training)

    def forward(self, x, training=False):
        self._x = x
        self._s = self.attention(x, training)
        return x * self._s[:, None, None, :]

    def backward(self, dy):
        x, s = self._x, self._s
        ds = np.einsum("nhwc,nhwc->nc", dy, x)
        dx_gate = self.pool.backward(self.excite.backward(ds))
        return dy * s[:, None, None, :] + dx_gate


def se_forward(x, block: SqueezeExcitation):
    return block.forward(x)


class DepthwiseDownsample(Sequential):
    """3x3 depthwise stride-2 convolution, then BN and ReLU; channels unchanged."""

    kind = "downsample"

    def __init__(self, name, channels, use_bn=True, use_bias=False, dtype=DEFAULT_DTYPE):
        layers = [DepthwiseConv2D("dwconv", channels, 3, stride=2, use_bias=use_bias,
                                  dtype=dtype)]
        if use_bn:
            layers.append(BatchNorm("bn", channels, dtype=dtype))
        layers.append(ReLU("relu"))
        super().__init__(name, layers)
        self.channels = channels

    def forward(self, x, training=False):
        if x.shape[1] < 2 or x.shape[2] < 2:
            raise GeometryError(f"{self.name}: cannot downsample spatial extent {x.shape[1:3]}")
        return super().forward(x, training)


def downsample_forward(x, block: DepthwiseDownsample, mode="infer"):
    return block.forward(x, training=(mode == "train"))


def plain_stage(name, in_channels, out_channels, use_bias=False, dtype=DEFAULT_DTYPE):
    """3x3 conv + BN + ReLU stage standing in for a residual block in the
    residual-free ablation."""
    conv = Conv2D("conv", in_channels, out_channels, 3, use_bias=use_bias, dtype=dtype)
    return conv_bn_relu(name, conv, out_channels, True, True, dtype)
