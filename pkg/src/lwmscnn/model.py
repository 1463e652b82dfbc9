"""Network assembly for LWMSCNN-SE and its ablation variants."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .blocks import (DepthwiseDownsample, ResidualMultiScaleBlock, RmsbConfig, SeConfig,
                     SqueezeExcitation, plain_stage)
from .errors import ConfigError, ShapeError
from .layers import (BatchNorm, Conv2D, Dense, Dropout, GlobalAvgPool, Layer, ReLU, Sequential,
                     softmax)
from .tensor import DEFAULT_DTYPE, make_rng

ABLATIONS = ("full", "no_se", "no_augmentation", "no_depthwise", "no_residual")
WIDTH_RULES = ("in", "in/2", "out", "out/2", "out/4", "out/8")
RESIDUAL_FREE_MODES = ("plain", "drop")

CLASS_NAMES = ("Gray Leaf Spot", "Common Rust", "Northern Leaf Blight", "Healthy")


def resolve_width(rule: str, cin: int, cout: int) -> int:
    table = {"in": cin, "in/2": cin // 2, "out": cout, "out/2": cout // 2,
             "out/4": cout // 4, "out/8": cout // 8}
    if rule not in table:
        raise ConfigError(f"unknown width rule {rule!r}; expected one of {WIDTH_RULES}")
    return max(table[rule], 1)


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of the network.

    The structural switches below ``ablation`` default to the reading that
    reproduces the published parameter budget (see ``analyzer.reconcile``).
    """

    input_size: tuple = (224, 224, 3)
    stem_filters: int = 32
    stage_channels: tuple = (64, 128, 256)
    se_reduction: int = 8
    dense_units: int = 192
    dropout_rate: float = 0.4
    num_classes: int = 4
    ablation: str = "full"

    branch_width: str = "in/2"
    standard_branch_width: str = "in/2"
    conv_bias: bool = False
    branch_bn: bool = True
    branch_act: bool = True
    shortcut_bn: bool = True
    downsample_bn: bool = True
    se_bias: bool = False
    residual_free: str = "plain"
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Small geometry for gradient checks and CPU-scale training."""
        base = dict(input_size=(16, 16, 3), stem_filters=8, stage_channels=(8, 16, 32),
                    dense_units=12)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "ModelConfig":
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        ch = self.stage_channels
        if len(ch) == 0 or any(b <= a for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing, got {ch}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ConfigError(f"bad input_size {self.input_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.residual_free not in RESIDUAL_FREE_MODES:
            raise ConfigError(f"residual_free must be one of {RESIDUAL_FREE_MODES}")
        for rule in (self.branch_width, self.standard_branch_width):
            if rule not in WIDTH_RULES:
                raise ConfigError(f"unknown width rule {rule!r}")
        return self

    @property
    def uses_augmentation(self) -> bool:
        return self.ablation != "no_augmentation"


class Model:
    def __init__(self, config: ModelConfig, layers: list[Layer], seed: int):
        self.config = config
        self.layers = layers
        self.seed = seed
        self.dtype = DEFAULT_DTYPE

    # -- traversal

    def leaves(self) -> Iterator[tuple[str, Layer]]:
        def walk(layer, prefix):
            kids = layer.children()
            name = prefix + layer.name
            if not kids:
                yield name, layer
            for kid in kids:
                yield from walk(kid, name + ".")
        for layer in self.layers:
            yield from walk(layer, "")

    def parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, leaf in self.leaves():
            for key, p in leaf.params.items():
                yield f"{name}.{key}", p, leaf.grads[key]

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer, in a fixed order."""
        out = {}
        for name, leaf in self.leaves():
            for key, p in leaf.params.items():
                out[f"{name}.{key}"] = p
            for key, b in leaf.buffers.items():
                out[f"{name}.{key}"] = b
        return out

    def set_tensor(self, full_name: str, value: np.ndarray):
        leaf_name, key = full_name.rsplit(".", 1)
        for name, leaf in self.leaves():
            if name == leaf_name:
                store = leaf.params if key in leaf.params else leaf.buffers
                store[key] = np.array(value, dtype=self.dtype, copy=True)
                if key in leaf.grads and leaf.grads[key].shape != store[key].shape:
                    leaf.grads[key] = np.zeros_like(store[key])
                return
        raise KeyError(full_name)

    def param_count(self) -> int:
        return sum(int(p.size) for _, p, _ in self.parameters())

    def dropout_layers(self):
        return [leaf for _, leaf in self.leaves() if isinstance(leaf, Dropout)]

    # -- compute

    def forward(self, x, training=False):
        """Logits for an (N, H, W, C) batch."""
        if x.shape[1:] != self.config.input_size:
            raise ShapeError(f"expected input (N, {self.config.input_size}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def predict(self, x):
        """Class probabilities (inference mode)."""
        return softmax(self.forward(x, training=False))

    def backward(self, dlogits):
        dy = dlogits
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = dtype
        return self

    def profile(self, input_shape=None):
        shape = tuple(input_shape or self.config.input_size)
        rows = []
        for layer in self.layers:
            rows += layer.profile(shape)
            shape = layer.output_shape(shape)
        return rows

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_tensors().items()}

    def set_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.set_tensor(k, v)


def build(cfg: ModelConfig, seed: int = 42, init: bool = True, dtype=DEFAULT_DTYPE) -> Model:
    """Assemble the network described by ``cfg``.

    With ``init`` the weights are drawn deterministically from ``seed``:
    He-scaled truncated normals for kernels, zero biases, unit BN scale.
    ``init=False`` leaves everything at zero, which is enough for static
    analysis.
    """
    cfg.validate()
    h, w, c_in = cfg.input_size
    ab = cfg.ablation
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))

    def bn(name, c):
        return BatchNorm(name, c, cfg.bn_momentum, cfg.bn_epsilon, dtype=dtype)

    layers: list[Layer] = [Sequential("stem", [
        Conv2D("conv", c_in, cfg.stem_filters, 3, stride=2, use_bias=cfg.conv_bias, dtype=dtype),
        bn("bn", cfg.stem_filters),
        ReLU("relu"),
    ])]
    cin = cfg.stem_filters
    n = len(cfg.stage_channels)
    for i, cout in enumerate(cfg.stage_channels, start=1):
        name = f"stage{i}"
        if ab == "no_residual" and cfg.residual_free == "plain":
            layers.append(plain_stage(name, cin, cout, cfg.conv_bias, dtype))
        else:
            rcfg = RmsbConfig(
                in_channels=cin, out_channels=cout,
                branch_channels=resolve_width(cfg.branch_width, cin, cout),
                use_residual=ab != "no_residual",
                use_depthwise=ab != "no_depthwise",
                standard_channels=resolve_width(cfg.standard_branch_width, cin, cout),
                branch_bn=cfg.branch_bn, branch_act=cfg.branch_act,
                shortcut_bn=cfg.shortcut_bn, conv_bias=cfg.conv_bias)
            layers.append(ResidualMultiScaleBlock(name, rcfg, dtype))
        if i < n:
            layers.append(DepthwiseDownsample(f"down{i}", cout, cfg.downsample_bn,
                                              cfg.conv_bias, dtype))
        cin = cout
    if ab != "no_se":
        layers.append(SqueezeExcitation("se", SeConfig(cin, cfg.se_reduction, cfg.se_bias), dtype))
    layers += [
        GlobalAvgPool("pool"),
        Dense("fc", cin, cfg.dense_units, dtype=dtype),
        ReLU("fc_relu"),
        Dropout("dropout", cfg.dropout_rate, dropout_rng),
        Dense("classifier", cfg.dense_units, cfg.num_classes, dtype=dtype),
    ]
    _apply_bn_settings(layers, cfg)
    model = Model(cfg, layers, seed)
    model.dtype = np.dtype(dtype)
    if init:
        rng = make_rng(seed)
        for layer in layers:
            layer.init_params(rng)
    return model


def _apply_bn_settings(layers, cfg):
    stack = list(layers)
    while stack:
        layer = stack.pop()
        if isinstance(layer, BatchNorm):
            layer.momentum, layer.epsilon = cfg.bn_momentum, cfg.bn_epsilon
        stack.extend(layer.children())
