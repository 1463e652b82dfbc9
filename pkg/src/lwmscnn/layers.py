"""Differentiable primitive layers with hand-written backward passes.

The module has two levels. Free functions (``conv2d_forward`` and friends)
are the raw kernels; the ``Layer`` subclasses wrap them, own parameters,
gradient slots and buffers, and cache whatever the backward pass needs.

Convolutions accumulate one ``(N, Ho, Wo, Cin) @ (Cin, Cout)`` product per
kernel offset instead of materialising an im2col matrix, which keeps peak
memory flat for the 224x224 network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError
from .tensor import DEFAULT_DTYPE, truncated_normal

PADDINGS = ("same", "valid")


@dataclass
class LayerRow:
    """Static cost of one leaf layer for a single-image forward pass."""

    name: str
    kind: str
    output_shape: tuple
    params: int
    macs: int = 0
    elementwise: int = 0
    bn_stats: int = 0


# ---------------------------------------------------------------- geometry


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < kernel:
            raise GeometryError(f"kernel {kernel} larger than input {size}")
        return (size - kernel) // stride + 1
    raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _pads(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    out = conv_output_size(size, kernel, stride, padding)
    if padding == "valid":
        return out, 0, 0
    total = max((out - 1) * stride + kernel - size, 0)
    # odd extra row/column goes to the bottom/right
    return out, total // 2, total - total // 2


def _geometry(x, kh, kw, stride, padding):
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    _, h, w, _ = x.shape
    ho, pt, pb = _pads(h, kh, stride, padding)
    wo, pl, pr = _pads(w, kw, stride, padding)
    if h + pt + pb < kh or w + pl + pr < kw:
        raise GeometryError(f"kernel {kh}x{kw} does not fit padded input {h}x{w}")
    return ho, wo, (pt, pb, pl, pr)


def _pad(x, pads):
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _window(xp, i, j, ho, wo, stride):
    return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]


def _crop(dxp, pads):
    pt, pb, pl, pr = pads
    return dxp[:, pt:dxp.shape[1] - pb, pl:dxp.shape[2] - pr, :]


# ---------------------------------------------------------------- kernels


def conv2d_forward(x, w, stride=1, padding="same"):
    """Cross-correlation of NHWC ``x`` with a (kh, kw, cin, cout) kernel."""
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    if kh == kw == 1 and stride == 1:
        return x @ w[0, 0]
    xp = _pad(x, pads)
    out = np.zeros((x.shape[0], ho, wo, cout), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, ho, wo, stride) @ w[i, j]
    return out


def conv2d_backward(x, w, dy, stride=1, padding="same"):
    """Returns (dx, dw)."""
    kh, kw, cin, cout = w.shape
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    if dy.shape != (x.shape[0], ho, wo, cout):
        raise ShapeError(f"upstream gradient shape {dy.shape} != output shape")
    dy2 = dy.reshape(-1, cout)
    if kh == kw == 1 and stride == 1:
        dw = (x.reshape(-1, cin).T @ dy2).reshape(w.shape)
        return dy @ w[0, 0].T, dw
    xp = _pad(x, pads)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            win = _window(xp, i, j, ho, wo, stride)
            dw[i, j] = win.reshape(-1, cin).T @ dy2
            _window(dxp, i, j, ho, wo, stride)[...] += dy @ w[i, j].T
    return _crop(dxp, pads), dw


def depthwise_conv2d_forward(x, w, stride=1, padding="same"):
    """Per-channel convolution with a (kh, kw, channels) kernel."""
    kh, kw, c = w.shape
    if x.shape[-1] != c:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {c}")
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    xp = _pad(x, pads)
    out = np.zeros((x.shape[0], ho, wo, c), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, ho, wo, stride) * w[i, j]
    return out


def depthwise_conv2d_backward(x, w, dy, stride=1, padding="same"):
    kh, kw, c = w.shape
    ho, wo, pads = _geometry(x, kh, kw, stride, padding)
    if dy.shape != (x.shape[0], ho, wo, c):
        raise ShapeError(f"upstream gradient shape {dy.shape} != output shape")
    xp = _pad(x, pads)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = np.einsum("nhwc,nhwc->c", _window(xp, i, j, ho, wo, stride), dy)
            _window(dxp, i, j, ho, wo, stride)[...] += dy * w[i, j]
    return _crop(dxp, pads), dw


def dense_forward(x, w, b=None):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input features {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x @ w
    return y if b is None else y + b


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_forward(x, rate, training, rng):
    """Inverted dropout. Returns (y, mask); mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self, name=""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add_param(self, key, shape, dtype):
        self.params[key] = np.zeros(shape, dtype=dtype)
        self.grads[key] = np.zeros(shape, dtype=dtype)

    def children(self) -> list["Layer"]:
        return []

    def init_params(self, rng):
        for child in self.children():
            child.init_params(rng)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)
        for child in self.children():
            child.zero_grad()

    def astype(self, dtype):
        for d in (self.params, self.grads, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        for child in self.children():
            child.astype(dtype)
        return self

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def param_count(self):
        return sum(int(p.size) for p in self.params.values())

    def profile(self, in_shape, prefix=""):
        out = self.output_shape(in_shape)
        return [LayerRow(prefix + self.name, self.kind, out, self.param_count(),
                         self._macs(in_shape, out), self._elementwise(in_shape, out),
                         sum(int(b.size) for b in self.buffers.values()))]

    def _macs(self, in_shape, out_shape):
        return 0

    def _elementwise(self, in_shape, out_shape):
        return 0

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def _he(rng, shape, fan_in, dtype):
    return truncated_normal(rng, shape, math.sqrt(2.0 / fan_in), dtype)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name, in_channels, out_channels, kernel, stride=1, padding="same",
                 use_bias=False, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.use_bias = use_bias
        self._add_param("kernel", (kernel, kernel, in_channels, out_channels), dtype)
        if use_bias:
            self._add_param("bias", (out_channels,), dtype)

    def init_params(self, rng):
        w = self.params["kernel"]
        w[...] = _he(rng, w.shape, self.kernel * self.kernel * self.in_channels, w.dtype)

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding), self.out_channels)

    def _macs(self, in_shape, out):
        return self.kernel * self.kernel * self.in_channels * out[0] * out[1] * out[2]

    def _elementwise(self, in_shape, out):
        return math.prod(out) if self.use_bias else 0

    def forward(self, x, training=False):
        self._x = x
        y = conv2d_forward(x, self.params["kernel"], self.stride, self.padding)
        if self.use_bias:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        dx, dw = conv2d_backward(self._x, self.params["kernel"], dy, self.stride, self.padding)
        self.grads["kernel"] += dw
        if self.use_bias:
            self.grads["bias"] += dy.sum(axis=(0, 1, 2))
        return dx


class DepthwiseConv2D(Layer):
    kind = "depthwise_conv2d"

    def __init__(self, name, channels, kernel, stride=1, padding="same", use_bias=False,
                 dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.channels, self.kernel, self.stride, self.padding = channels, kernel, stride, padding
        self.use_bias = use_bias
        self._add_param("kernel", (kernel, kernel, channels), dtype)
        if use_bias:
            self._add_param("bias", (channels,), dtype)

    def init_params(self, rng):
        w = self.params["kernel"]
        w[...] = _he(rng, w.shape, self.kernel * self.kernel, w.dtype)

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding), c)

    def _macs(self, in_shape, out):
        return self.kernel * self.kernel * math.prod(out)

    def _elementwise(self, in_shape, out):
        return math.prod(out) if self.use_bias else 0

    def forward(self, x, training=False):
        self._x = x
        y = depthwise_conv2d_forward(x, self.params["kernel"], self.stride, self.padding)
        if self.use_bias:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        dx, dw = depthwise_conv2d_backward(self._x, self.params["kernel"], dy,
                                           self.stride, self.padding)
        self.grads["kernel"] += dw
        if self.use_bias:
            self.grads["bias"] += dy.sum(axis=(0, 1, 2))
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis but the last."""

    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.99, epsilon=1e-3, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.channels, self.momentum, self.epsilon = channels, momentum, epsilon
        self._add_param("gamma", (channels,), dtype)
        self._add_param("beta", (channels,), dtype)
        self.params["gamma"].fill(1)
        self.buffers["moving_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["moving_variance"] = np.ones(channels, dtype=dtype)

    def init_params(self, rng):
        self.params["gamma"].fill(1)
        self.params["beta"].fill(0)

    def _elementwise(self, in_shape, out):
        return math.prod(out)

    def forward(self, x, training=False):
        return batchnorm_forward(x, self, "train" if training else "infer")

    def backward(self, dy):
        xhat, inv_std, mode = self._cache
        gamma = self.params["gamma"]
        axes = tuple(range(dy.ndim - 1))
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * gamma
        if mode == "infer":
            return dxhat * inv_std
        m = dy.size // dy.shape[-1]
        return (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))


def batchnorm_forward(x, layer: BatchNorm, mode="infer"):
    """Normalise ``x`` with batch statistics ("train") or running ones ("infer").

    Train mode also moves the layer's running statistics towards the batch
    statistics by an exponential moving average.
    """
    c = layer.channels
    if x.shape[-1] != c:
        raise ShapeError(f"input has {x.shape[-1]} channels, batch norm expects {c}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        mom = layer.momentum
        layer.buffers["moving_mean"] = (mom * layer.buffers["moving_mean"]
                                        + (1 - mom) * mean).astype(x.dtype)
        layer.buffers["moving_variance"] = (mom * layer.buffers["moving_variance"]
                                            + (1 - mom) * var).astype(x.dtype)
    else:
        mean = layer.buffers["moving_mean"]
        var = layer.buffers["moving_variance"]
    inv_std = (1.0 / np.sqrt(var + layer.epsilon)).astype(x.dtype)
    xhat = (x - mean) * inv_std
    layer._cache = (xhat, inv_std, mode)
    return layer.params["gamma"] * xhat + layer.params["beta"]


class ReLU(Layer):
    kind = "relu"

    def _elementwise(self, in_shape, out):
        return math.prod(out)

    def forward(self, x, training=False):
        self._mask = x > 0
        return relu(x)

    def backward(self, dy):
        # derivative at exactly 0 is taken as 0
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def _elementwise(self, in_shape, out):
        return math.prod(out)

    def forward(self, x, training=False):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1 - self._y)


class Softmax(Layer):
    kind = "softmax"

    def _elementwise(self, in_shape, out):
        return math.prod(out)

    def forward(self, x, training=False):
        self._y = softmax(x)
        return self._y

    def backward(self, dy):
        y = self._y
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features, out_features, use_bias=True, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.in_features, self.out_features, self.use_bias = in_features, out_features, use_bias
        self._add_param("kernel", (in_features, out_features), dtype)
        if use_bias:
            self._add_param("bias", (out_features,), dtype)

    def init_params(self, rng):
        w = self.params["kernel"]
        w[...] = _he(rng, w.shape, self.in_features, w.dtype)
        if self.use_bias:
            self.params["bias"].fill(0)

    def output_shape(self, in_shape):
        return (self.out_features,)

    def _macs(self, in_shape, out):
        return self.in_features * self.out_features

    def _elementwise(self, in_shape, out):
        return self.out_features if self.use_bias else 0

    def forward(self, x, training=False):
        self._x = x
        return dense_forward(x, self.params["kernel"], self.params.get("bias"))

    def backward(self, dy):
        if dy.shape != self._x.shape[:-1] + (self.out_features,):
            raise ShapeError(f"upstream gradient shape {dy.shape} != output shape")
        self.grads["kernel"] += self._x.T @ dy
        if self.use_bias:
            self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["kernel"].T


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate, rng=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, training=False):
        y, self._mask = dropout_forward(x, self.rate, training, self.rng)
        return y

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class GlobalAvgPool(Layer):
    """(N, H, W, C) -> (N, C) spatial mean."""

    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        return (in_shape[-1],)

    def _elementwise(self, in_shape, out):
        return math.prod(in_shape)

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        n, h, w, c = self._shape
        return np.broadcast_to(dy[:, None, None, :] / (h * w), self._shape).copy()


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def children(self):
        return self.layers

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def profile(self, in_shape, prefix=""):
        rows = []
        for layer in self.layers:
            rows += layer.profile(in_shape, prefix + self.name + ".")
            in_shape = layer.output_shape(in_shape)
        return rows

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def conv_bn_relu(name, conv, channels, bn=True, act=True, dtype=DEFAULT_DTYPE):
    layers = [conv]
    if bn:
        layers.append(BatchNorm("bn", channels, dtype=dtype))
    if act:
        layers.append(ReLU("relu"))
    return Sequential(name, layers)
