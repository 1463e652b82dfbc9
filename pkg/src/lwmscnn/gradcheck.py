"""Central-difference gradient checks for layers, blocks and the whole network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .blocks import (DepthwiseDownsample, ResidualMultiScaleBlock, RmsbConfig, SeConfig,
                     SqueezeExcitation)
from .layers import (BatchNorm, Conv2D, Dense, DepthwiseConv2D, Dropout, GlobalAvgPool, Layer,
                     ReLU, Sigmoid, Softmax)
from .model import Model, ModelConfig, build
from .tensor import GRADCHECK_DTYPE
from .training import sparse_ce_loss

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    tensor: str
    rel_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.rel_error <= TOLERANCE


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _leaves(layer: Layer, prefix=""):
    kids = layer.children()
    name = prefix + layer.name
    if not kids:
        yield name, layer
    for kid in kids:
        yield from _leaves(kid, name + ".")


def _params(target):
    if isinstance(target, Model):
        return [(n, p) for n, p, _ in target.parameters()]
    return [(f"{n}.{k}", leaf.params[k]) for n, leaf in _leaves(target) for k in leaf.params]


def _grads(target):
    if isinstance(target, Model):
        return {n: g for n, _, g in target.parameters()}
    return {f"{n}.{k}": leaf.grads[k] for n, leaf in _leaves(target) for k in leaf.grads}


def _dropouts(target):
    leaves = target.leaves() if isinstance(target, Model) else _leaves(target)
    return [leaf for _, leaf in leaves if isinstance(leaf, Dropout)]


def _positions(size, limit, rng):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def check(target, x, name=None, training=True, labels=None, max_per_tensor=None,
          seed=0, step=STEP) -> list[CheckResult]:
    """Compare analytic and numerical gradients of one scalar objective.

    The objective is ``sum(r * f(x))`` for a fixed random ``r``, or the
    cross-entropy loss when ``labels`` are given. Dropout generators are
    rewound before every forward pass so each evaluation sees the same mask.
    ``max_per_tensor`` limits how many entries of each tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    name = name or getattr(target, "name", type(target).__name__)
    drops = _dropouts(target)
    states = [d.rng.bit_generator.state for d in drops]

    def rewind():
        for d, s in zip(drops, states):
            d.rng.bit_generator.state = s

    rewind()
    y = target.forward(x, training)
    r = None if labels is not None else rng.standard_normal(y.shape)

    def objective(out):
        if labels is not None:
            return sparse_ce_loss(out, labels)
        return float(np.sum(r * out)), r

    def f():
        rewind()
        return objective(target.forward(x, training))[0]

    target.zero_grad()
    rewind()
    _, dy = objective(target.forward(x, training))
    dx = target.backward(dy)
    analytic = {"input": dx.copy(), **{k: g.copy() for k, g in _grads(target).items()}}

    results = []
    for tname, arr in [("input", x)] + _params(target):
        flat = arr.reshape(-1)
        pos = _positions(flat.size, max_per_tensor, rng)
        num = np.empty(len(pos))
        for j, i in enumerate(pos):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            num[j] = (fp - fm) / (2 * step)
        ana = analytic[tname].reshape(-1)[pos]
        results.append(CheckResult(name, tname, rel_error(ana, num), len(pos)))
    return results


def _init(layer, seed=0):
    layer.astype(GRADCHECK_DTYPE)
    layer.init_params(np.random.default_rng(seed))
    # move BN affine terms off their trivial initial values
    for _, leaf in _leaves(layer):
        if isinstance(leaf, BatchNorm):
            r = np.random.default_rng(seed + 1)
            leaf.params["gamma"][:] = r.uniform(0.5, 1.5, leaf.channels)
            leaf.params["beta"][:] = r.normal(0, 0.1, leaf.channels)
            leaf.buffers["moving_mean"][:] = r.normal(0, 0.1, leaf.channels)
            leaf.buffers["moving_variance"][:] = r.uniform(0.5, 1.5, leaf.channels)
        if "bias" in leaf.params:
            leaf.params["bias"][:] = np.random.default_rng(seed + 2).normal(
                0, 0.1, leaf.params["bias"].shape)
    return layer


def layer_cases():
    """(layer, input shape, training flag) triples covering every layer kind."""
    f64 = GRADCHECK_DTYPE
    return [
        (Conv2D("conv3x3_same", 3, 4, 3, dtype=f64), (2, 5, 5, 3), True),
        (Conv2D("conv3x3_s2_bias", 3, 4, 3, stride=2, use_bias=True, dtype=f64), (2, 6, 5, 3),
         True),
        (Conv2D("conv3x3_valid", 2, 3, 3, padding="valid", dtype=f64), (2, 5, 6, 2), True),
        (Conv2D("conv1x1", 4, 3, 1, dtype=f64), (2, 4, 4, 4), True),
        (DepthwiseConv2D("dw3x3", 3, 3, dtype=f64), (2, 5, 5, 3), True),
        (DepthwiseConv2D("dw5x5_bias", 3, 5, use_bias=True, dtype=f64), (2, 6, 6, 3), True),
        (DepthwiseConv2D("dw3x3_s2", 3, 3, stride=2, dtype=f64), (2, 7, 6, 3), True),
        (Dense("dense", 6, 4, dtype=f64), (3, 6), True),
        (BatchNorm("bn_train", 3, dtype=f64), (4, 3, 3, 3), True),
        (BatchNorm("bn_infer", 3, dtype=f64), (4, 3, 3, 3), False),
        (ReLU("relu"), (3, 7), True),
        (Sigmoid("sigmoid"), (3, 7), True),
        (Softmax("softmax"), (3, 5), True),
        (Dropout("dropout", 0.4, np.random.default_rng(3)), (3, 8), True),
        (GlobalAvgPool("gap"), (2, 3, 4, 5), True),
        (ResidualMultiScaleBlock("rmsb_projected", RmsbConfig(4, 6, branch_channels=2), f64),
         (2, 5, 5, 4), True),
        (ResidualMultiScaleBlock("rmsb_identity", RmsbConfig(4, 4, branch_channels=2), f64),
         (2, 5, 5, 4), True),
        (ResidualMultiScaleBlock("rmsb_no_residual",
                                 RmsbConfig(4, 6, branch_channels=2, use_residual=False), f64),
         (2, 5, 5, 4), True),
        (ResidualMultiScaleBlock("rmsb_standard",
                                 RmsbConfig(4, 6, branch_channels=2, use_depthwise=False,
                                            standard_channels=2), f64),
         (2, 5, 5, 4), True),
        (ResidualMultiScaleBlock("rmsb_infer", RmsbConfig(4, 6, branch_channels=2), f64),
         (2, 5, 5, 4), False),
        (SqueezeExcitation("se", SeConfig(8, 4, use_bias=True), f64), (2, 3, 3, 8), True),
        (SqueezeExcitation("se_nobias", SeConfig(8, 4, use_bias=False), f64), (2, 3, 3, 8),
         True),
        (DepthwiseDownsample("downsample", 3, dtype=f64), (2, 6, 6, 3), True),
    ]


def check_layers(seed=0) -> list[CheckResult]:
    results = []
    for i, (layer, shape, training) in enumerate(layer_cases()):
        _init(layer, seed + i)
        x = np.random.default_rng(seed + 100 + i).standard_normal(shape)
        results += check(layer, x, training=training, seed=seed + i)
    return results


def check_model(config: Optional[ModelConfig] = None, batch=2, seed=42,
                max_per_tensor: Optional[int] = 24) -> list[CheckResult]:
    """Full-network check at reduced geometry through the cross-entropy loss."""
    cfg = config or ModelConfig.reduced(se_bias=True)
    model = build(cfg, seed=seed, dtype=GRADCHECK_DTYPE)
    for _, leaf in model.leaves():
        if isinstance(leaf, BatchNorm):
            _init(leaf, seed)
    rng = np.random.default_rng(seed)
    x = rng.random((batch,) + cfg.input_size)
    labels = rng.integers(0, cfg.num_classes, batch)
    return check(model, x, name=f"model[{cfg.ablation}]", training=True, labels=labels,
                 max_per_tensor=max_per_tensor, seed=seed)


def run_all(seed=0, max_per_tensor: Optional[int] = 24) -> list[CheckResult]:
    results = check_layers(seed)
    for ablation in ("full", "no_se", "no_depthwise", "no_residual"):
        results += check_model(ModelConfig.reduced(ablation=ablation, se_bias=True),
                               max_per_tensor=max_per_tensor)
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<26}{'tensor':<48}{'entries':>8}{'rel error':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<26}{r.tensor:<48}{r.checked:>8}{r.rel_error:>12.2e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
