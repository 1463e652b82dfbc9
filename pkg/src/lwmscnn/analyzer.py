"""Static architecture analysis: parameter and FLOP counts, efficiency, reconciliation."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from .layers import LayerRow
from .model import ABLATIONS, RESIDUAL_FREE_MODES, WIDTH_RULES, Model, ModelConfig, build

# published budgets for the four architecture variants (no_augmentation
# shares the full architecture)
PUBLISHED_PARAMS = {"full": 241_348, "no_se": 224_968, "no_depthwise": 640_100,
                    "no_residual": 456_508}
PUBLISHED_GFLOPS = {"full": 0.666, "no_se": 0.665, "no_depthwise": 1.876, "no_residual": 1.419}
PUBLISHED_SE_DELTA = PUBLISHED_PARAMS["full"] - PUBLISHED_PARAMS["no_se"]

# model: (parameters, GFLOPs, accuracy %, printed efficiency)
COMPARISON_TABLE = {
    "ResNet50": (23_981_892, 7.752, 97.67, 12.61),
    "VGG16": (14_813_956, 30.713, 97.15, 3.16),
    "EfficientNet-B0": (4_254_272, 0.801, 94.3, 117.83),
    "MobileNetV1": (3_404_548, 1.146, 96.89, 84.72),
    "LWMSCNN-SE": (241_348, 0.666, 96.63, 145.31),
}


@dataclass(frozen=True)
class Convention:
    """How raw layer costs turn into reported numbers.

    mac_flops: FLOPs charged per multiply-accumulate (2 or 1).
    elementwise: charge one op per output element of BN, activations,
        residual adds, SE reweighting and bias adds, and one per input
        element of global pooling.
    bn_stats: also count BN running mean/variance as parameters.
    """

    mac_flops: int = 2
    elementwise: bool = True
    bn_stats: bool = False

    def flops(self, row: LayerRow) -> int:
        return self.mac_flops * row.macs + (row.elementwise if self.elementwise else 0)

    def params(self, row: LayerRow) -> int:
        return row.params + (row.bn_stats if self.bn_stats else 0)


@dataclass
class ArchReport:
    variant: str
    input_shape: tuple
    convention: Convention
    rows: list[LayerRow]
    total_params: int
    total_flops: int
    accuracy: Optional[float] = None

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def efficiency(self) -> Optional[float]:
        return None if self.accuracy is None else efficiency(self.accuracy, self.gflops)

    def to_dict(self) -> dict:
        conv = self.convention
        return {
            "variant": self.variant,
            "input_shape": list(self.input_shape),
            "convention": asdict(conv),
            "layers": [{"name": r.name, "kind": r.kind, "output_shape": list(r.output_shape),
                        "params": conv.params(r), "flops": conv.flops(r)} for r in self.rows],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "gflops": round(self.gflops, 6),
            "accuracy": self.accuracy,
            "efficiency": self.efficiency,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        conv = self.convention
        lines = [f"variant: {self.variant}   input: {'x'.join(map(str, self.input_shape))}   "
                 f"convention: {conv.mac_flops} FLOP/MAC, elementwise="
                 f"{'on' if conv.elementwise else 'off'}, bn_stats="
                 f"{'on' if conv.bn_stats else 'off'}",
                 f"{'layer':<44} {'kind':<17} {'output':>14} {'params':>9} {'flops':>13}"]
        lines.append("-" * len(lines[-1]))
        for r in self.rows:
            shape = "x".join(map(str, r.output_shape))
            lines.append(f"{r.name:<44} {r.kind:<17} {shape:>14} {conv.params(r):>9,} "
                         f"{conv.flops(r):>13,}")
        lines.append("-" * len(lines[1]))
        lines.append(f"{'total':<44} {'':<17} {'':>14} {self.total_params:>9,} "
                     f"{self.total_flops:>13,}")
        lines.append(f"GFLOPs: {self.gflops:.4f}")
        if self.accuracy is not None:
            lines.append(f"efficiency (accuracy % / GFLOPs): {self.efficiency:.2f}")
        return "\n".join(lines)


def count_params(model: Model, convention: Convention = Convention()):
    """Per-leaf parameter counts and their total."""
    rows = [(r.name, convention.params(r)) for r in model.profile()]
    return rows, sum(n for _, n in rows)


def count_flops(model: Model, input_shape=None, convention: Convention = Convention()):
    rows = [(r.name, convention.flops(r)) for r in model.profile(input_shape)]
    return rows, sum(n for _, n in rows)


def analyze(model: Model, convention: Convention = Convention(), accuracy=None,
            input_shape=None) -> ArchReport:
    shape = tuple(input_shape or model.config.input_size)
    rows = model.profile(shape)
    return ArchReport(model.config.ablation, shape, convention, rows,
                      sum(convention.params(r) for r in rows),
                      sum(convention.flops(r) for r in rows), accuracy)


def efficiency(accuracy_percent: float, gflops: float) -> float:
    """Accuracy points per GFLOP."""
    if not gflops > 0:
        raise ValueError(f"gflops must be positive, got {gflops}")
    return accuracy_percent / gflops


# ---------------------------------------------------------------- reconciliation

STRUCTURAL_SPACE = {
    "branch_width": list(WIDTH_RULES),
    "standard_branch_width": list(WIDTH_RULES),
    "conv_bias": [False, True],
    "branch_bn": [True, False],
    "branch_act": [True, False],
    "shortcut_bn": [True, False],
    "downsample_bn": [True, False],
    "se_bias": [False, True],
    "residual_free": list(RESIDUAL_FREE_MODES),
}
CONVENTION_SPACE = {
    "mac_flops": [2, 1],
    "elementwise": [True, False],
    "bn_stats": [False, True],
}
VARIANTS = ("full", "no_se", "no_depthwise", "no_residual")

# fields each variant's structure actually depends on
_RELEVANT = {
    "full": ("branch_width", "conv_bias", "branch_bn", "branch_act", "shortcut_bn",
             "downsample_bn", "se_bias"),
    "no_se": ("branch_width", "conv_bias", "branch_bn", "branch_act", "shortcut_bn",
              "downsample_bn"),
    "no_depthwise": ("branch_width", "standard_branch_width", "conv_bias", "branch_bn",
                     "branch_act", "shortcut_bn", "downsample_bn", "se_bias"),
    "no_residual": ("branch_width", "conv_bias", "branch_bn", "branch_act", "shortcut_bn",
                    "downsample_bn", "se_bias", "residual_free"),
}
_PLAIN_IRRELEVANT = ("branch_width", "branch_bn", "branch_act", "shortcut_bn")


@dataclass
class Discrepancy:
    variant: str
    target_params: int
    params: int
    target_gflops: float
    gflops: float

    @property
    def param_rel_error(self) -> float:
        return (self.params - self.target_params) / self.target_params

    @property
    def gflops_rel_error(self) -> float:
        return (self.gflops - self.target_gflops) / self.target_gflops


@dataclass
class ReconcileResult:
    config: ModelConfig
    convention: Convention
    discrepancies: list[Discrepancy]
    exact_matches: int
    candidates: int
    ranking: list = field(default_factory=list, repr=False)

    @property
    def se_delta(self) -> int:
        by = {d.variant: d.params for d in self.discrepancies}
        return by["full"] - by["no_se"]

    def to_text(self) -> str:
        lines = [f"candidates evaluated: {self.candidates}",
                 f"exact parameter matches: {self.exact_matches}/{len(self.discrepancies)}",
                 "chosen structure: " + ", ".join(
                     f"{k}={getattr(self.config, k)}" for k in STRUCTURAL_SPACE),
                 f"chosen convention: {asdict(self.convention)}",
                 f"{'variant':<14}{'target params':>15}{'params':>11}{'rel':>9}"
                 f"{'target GF':>11}{'GFLOPs':>9}{'rel':>9}"]
        for d in self.discrepancies:
            lines.append(f"{d.variant:<14}{d.target_params:>15,}{d.params:>11,}"
                         f"{d.param_rel_error:>+9.2%}{d.target_gflops:>11.3f}{d.gflops:>9.4f}"
                         f"{d.gflops_rel_error:>+9.2%}")
        lines.append(f"SE removal delta: {self.se_delta:,} (target {PUBLISHED_SE_DELTA:,})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "config": {k: getattr(self.config, k) for k in STRUCTURAL_SPACE},
            "convention": asdict(self.convention),
            "exact_matches": self.exact_matches,
            "candidates": self.candidates,
            "se_delta": self.se_delta,
            "discrepancies": [dict(asdict(d), param_rel_error=d.param_rel_error,
                                   gflops_rel_error=d.gflops_rel_error)
                              for d in self.discrepancies],
        }


def _variant_key(variant, structure):
    fields = _RELEVANT[variant]
    if variant == "no_residual" and structure["residual_free"] == "plain":
        fields = tuple(f for f in fields if f not in _PLAIN_IRRELEVANT)
    return variant, tuple((f, structure[f]) for f in fields)


def reconcile(target_params=None, target_gflops=None, search_space=None,
              convention_space=None, base: ModelConfig = ModelConfig()) -> ReconcileResult:
    """Exhaustively score structural readings against the published budgets.

    Every combination of ``search_space`` (structure) and ``convention_space``
    (counting rules) is scored by the number of exactly matched parameter
    targets, then by summed relative parameter error, then by summed
    relative GFLOP error. Remaining ties go to the lexicographically
    smallest field tuple, so the result is deterministic.
    """
    target_params = dict(target_params or PUBLISHED_PARAMS)
    target_gflops = dict(target_gflops or PUBLISHED_GFLOPS)
    space = dict(STRUCTURAL_SPACE if search_space is None else search_space)
    conv_space = dict(CONVENTION_SPACE if convention_space is None else convention_space)
    for name, values in itertools.chain(space.items(), conv_space.items()):
        if len(values) == 0:
            raise ValueError(f"search dimension {name!r} is empty")
    if not space and not conv_space:
        raise ValueError("empty search space")
    variants = [v for v in VARIANTS if v in target_params]

    cache: dict = {}

    def profile(variant, structure):
        key = _variant_key(variant, {**{k: getattr(base, k) for k in STRUCTURAL_SPACE},
                                     **structure})
        if key not in cache:
            cfg = base.replace(ablation=variant, **structure)
            rows = build(cfg, init=False).profile()
            cache[key] = (sum(r.params for r in rows), sum(r.bn_stats for r in rows),
                          sum(r.macs for r in rows), sum(r.elementwise for r in rows))
        return cache[key]

    names = list(space)
    conv_names = list(conv_space)
    scored = []
    for values in itertools.product(*(space[n] for n in names)):
        structure = dict(zip(names, values))
        raw = {v: profile(v, structure) for v in variants}
        for cvalues in itertools.product(*(conv_space[n] for n in conv_names)):
            conv = Convention(**dict(zip(conv_names, cvalues)))
            exact, perr, ferr = 0, 0.0, 0.0
            for v in variants:
                p, bn, macs, ew = raw[v]
                params = p + (bn if conv.bn_stats else 0)
                gf = (conv.mac_flops * macs + (ew if conv.elementwise else 0)) / 1e9
                exact += params == target_params[v]
                perr += abs(params - target_params[v]) / target_params[v]
                ferr += abs(gf - target_gflops[v]) / target_gflops[v]
            tie = tuple(str(x) for x in values + cvalues)
            scored.append(((-exact, round(perr, 12), round(ferr, 12), tie), structure, conv))
    scored.sort(key=lambda s: s[0])
    (neg_exact, _, _, _), structure, conv = scored[0]
    cfg = base.replace(**structure)
    disc = []
    for v in variants:
        p, bn, macs, ew = _raw_for(cache, v, structure, base)
        params = p + (bn if conv.bn_stats else 0)
        gf = (conv.mac_flops * macs + (ew if conv.elementwise else 0)) / 1e9
        disc.append(Discrepancy(v, target_params[v], params, target_gflops[v], gf))
    return ReconcileResult(cfg, conv, disc, -neg_exact, len(scored),
                           [(s[0], s[1], s[2]) for s in scored[:20]])


def _raw_for(cache, variant, structure, base):
    key = _variant_key(variant, {**{k: getattr(base, k) for k in STRUCTURAL_SPACE}, **structure})
    return cache[key]


def variant_report(variant: str, config: ModelConfig = ModelConfig(),
                   convention: Convention = Convention(), accuracy=None) -> ArchReport:
    if variant not in ABLATIONS:
        raise ValueError(f"unknown variant {variant!r}")
    return analyze(build(config.replace(ablation=variant), init=False), convention, accuracy)


def se_delta_candidates(channels=256, reduction=8) -> dict[str, int]:
    """Parameter cost of the SE module under each bias convention."""
    h = max(channels // reduction, 1)
    return {"with_bias": 2 * channels * h + h + channels, "no_bias": 2 * channels * h}


def gflops_ratio(a: float, b: float) -> float:
    return a / b if b else math.inf
