"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` objects. Activations use the
batch-height-width-channels layout, convolution kernels are stored as
(kernel_h, kernel_w, in_channels, out_channels). The helpers here add the
validation rules the rest of the package relies on; none of them mutate
their inputs.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidAxisError, InvalidShapeError, ShapeError

DEFAULT_DTYPE = np.float32
GRADCHECK_DTYPE = np.float64

_ELEMENTWISE_OPS = ("add", "sub", "mul", "max", "scale")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the draw sequence is identical across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShapeError(f"invalid shape {shape}: need at least one extent, all >= 1")
    return shape


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Apply ``op`` positionally.

    ``b`` is a scalar, a tensor of ``a``'s shape, or a vector broadcast along
    the trailing channel axis. ``max`` and ``scale`` take a scalar ``b``.
    """
    if op not in _ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = np.asarray(a)
    if op in ("max", "scale"):
        if np.ndim(b) != 0:
            raise ShapeError(f"{op} expects a scalar operand")
        return np.maximum(a, b) if op == "max" else a * b
    if np.ndim(b) != 0:
        b = np.asarray(b)
        if b.shape != a.shape and not (b.ndim == 1 and b.shape[0] == a.shape[-1]):
            raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def _check_axes(t: np.ndarray, axes: Iterable[int]) -> tuple[int, ...]:
    out = []
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise InvalidAxisError(f"axis {ax} out of range for rank {t.ndim}")
        out.append(ax % t.ndim)
    return tuple(sorted(set(out)))


def reduce_mean(t: np.ndarray, axes: Iterable[int]) -> np.ndarray:
    """Mean over ``axes``; reduced axes are kept with extent 1.

    Sums are accumulated in float64 in a fixed order and cast back, which
    keeps results reproducible and within rounding of the exact mean.
    """
    axes = _check_axes(t, axes)
    return np.mean(t, axis=axes, keepdims=True, dtype=np.float64).astype(t.dtype)


def rng_normal(rng: np.random.Generator, shape: Sequence[int], stddev: float,
               dtype=np.float64) -> np.ndarray:
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    return (rng.standard_normal(check_shape(shape)) * stddev).astype(dtype)


def truncated_normal(rng: np.random.Generator, shape: Sequence[int], stddev: float,
                     dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal draws re-sampled outside two standard deviations.

    The scale is corrected so that the truncated distribution has ``stddev``
    as its standard deviation.
    """
    # std of a unit normal truncated to [-2, 2]
    scale = stddev / 0.87962566103423978
    out = rng.standard_normal(check_shape(shape))
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * scale).astype(dtype)


def ravel_index(index: Sequence[int], shape: Sequence[int]) -> int:
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unravel_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(flat, tuple(shape)))
