"""One test group per acceptance criterion; the terminal summary prints PASS/FAIL per criterion."""
import os
import re
import struct
import time
import zlib

import numpy as np
import pytest

import oracles
from conftest import record
from lwmscnn import analyzer, cli, data, gradcheck
from lwmscnn.blocks import ResidualMultiScaleBlock, RmsbConfig, SeConfig, SqueezeExcitation
from lwmscnn.errors import WeightFormatError
from lwmscnn.layers import (BatchNorm, conv2d_forward, dense_forward, depthwise_conv2d_forward,
                            softmax)
from lwmscnn.model import ModelConfig, build
from lwmscnn.training import Adam, run_epoch, train
from lwmscnn.weights import decode, encode

VARIANTS = ("full", "no_se", "no_depthwise", "no_residual")


@pytest.fixture(scope="module")
def reconciled():
    return analyzer.reconcile()


# ---------------------------------------------------------------- 1, 2: counts


C1 = "parameter counts after reconciliation (exact, or fallback gate 1% / SE delta 2%)"
C2 = "GFLOPs within 1% under the reconciled convention"


@pytest.mark.parametrize("variant", VARIANTS)
def test_c1_parameter_counts(reconciled, variant, tmp_path):
    d = {x.variant: x for x in reconciled.discrepancies}[variant]
    exact = reconciled.exact_matches == len(VARIANTS)
    ok = d.params == d.target_params if exact else abs(d.param_rel_error) <= 0.01
    record("1", C1, ok, f"{d.params:,} vs {d.target_params:,} ({d.param_rel_error:+.2%})",
           variant)
    # the discrepancy report is part of the fallback contract
    (tmp_path / "reconcile.txt").write_text(reconciled.to_text())
    assert variant in (tmp_path / "reconcile.txt").read_text()
    assert ok, reconciled.to_text()


def test_c1_se_delta(reconciled):
    delta = reconciled.se_delta
    ok = abs(delta - analyzer.PUBLISHED_SE_DELTA) <= 0.02 * analyzer.PUBLISHED_SE_DELTA
    record("1", C1, ok, f"{delta:,} vs {analyzer.PUBLISHED_SE_DELTA:,}", "SE delta")
    assert ok


def test_c1_full_model_exact(reconciled):
    d = reconciled.discrepancies[0]
    assert d.variant == "full" and d.params == 241_348


@pytest.mark.parametrize("variant", VARIANTS)
def test_c2_gflops(reconciled, variant):
    t0 = time.perf_counter()
    d = {x.variant: x for x in reconciled.discrepancies}[variant]
    report = analyzer.variant_report(variant, reconciled.config, reconciled.convention)
    assert report.gflops == pytest.approx(d.gflops, rel=1e-12)
    ok = abs(d.gflops_rel_error) <= 0.01
    record("2", C2, ok, f"{d.gflops:.4f} vs {d.target_gflops} ({d.gflops_rel_error:+.2%})",
           variant)
    assert time.perf_counter() - t0 < 10
    assert ok


# ---------------------------------------------------------------- 3: efficiency


def test_c3_efficiency_formula():
    worst = 0.0
    for name, (_, gflops, acc, printed) in analyzer.COMPARISON_TABLE.items():
        worst = max(worst, abs(analyzer.efficiency(acc, gflops) - printed))
    ok = worst < 0.3
    record("3", "accuracy/GFLOPs reproduces the efficiency column (< 0.3)", ok,
           f"max deviation {worst:.3f}")
    assert ok


# ---------------------------------------------------------------- 4: gradients


def test_c4_gradient_integrity():
    t0 = time.perf_counter()
    results = gradcheck.check_layers()
    for ablation in VARIANTS:
        results += gradcheck.check_model(ModelConfig.reduced(ablation=ablation, se_bias=True),
                                         max_per_tensor=None if ablation == "full" else 24)
    worst = max(results, key=lambda r: r.rel_error)
    elapsed = time.perf_counter() - t0
    ok = worst.passed and elapsed < 300
    record("4", "central-difference gradients, rel error <= 1e-4 (float64)", ok,
           f"{len(results)} tensors, worst {worst.rel_error:.1e} ({worst.name}/{worst.tensor}), "
           f"{elapsed:.0f}s")
    assert ok, gradcheck.format_table([worst])


# ---------------------------------------------------------------- 5: oracles


C5 = "scalar-loop oracle equivalence, 100 random cases each, rel error <= 1e-6"
CASES = 100


def _geom(rng, min_hw=1):
    n = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(min_hw, 7, 2))
    return n, h, w


def _f32(rng, shape, scale=1.0, shift=0.0):
    return (rng.standard_normal(shape) * scale + shift).astype(np.float32)


def _conv_case(rng):
    n, h, w = _geom(rng)
    cin, cout = (int(v) for v in rng.integers(1, 5, 2))
    k, s = int(rng.choice([1, 3, 5])), int(rng.integers(1, 3))
    pad = "valid" if rng.random() < 0.3 and min(h, w) >= k else "same"
    x, wt = _f32(rng, (n, h, w, cin)), _f32(rng, (k, k, cin, cout))
    return conv2d_forward(x, wt, s, pad), oracles.conv2d(x, wt, s, pad)


def _depthwise_case(rng):
    n, h, w = _geom(rng)
    c = int(rng.integers(1, 5))
    k, s = int(rng.choice([3, 5])), int(rng.integers(1, 3))
    pad = "valid" if rng.random() < 0.3 and min(h, w) >= k else "same"
    x, wt = _f32(rng, (n, h, w, c)), _f32(rng, (k, k, c))
    return depthwise_conv2d_forward(x, wt, s, pad), oracles.depthwise(x, wt, s, pad)


def _dense_case(rng):
    n, fin, fout = (int(v) for v in rng.integers(1, 9, 3))
    x, wt, b = _f32(rng, (n, fin)), _f32(rng, (fin, fout)), _f32(rng, (fout,))
    return dense_forward(x, wt, b), oracles.dense(x, wt, b)


def _bn_case(rng):
    n, h, w = _geom(rng, 3)
    c = int(rng.integers(1, 5))
    bn = BatchNorm("bn", c)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, c)
    bn.params["beta"][:] = rng.normal(0, 1, c)
    bn.buffers["moving_mean"][:] = rng.normal(0, 1, c)
    bn.buffers["moving_variance"][:] = rng.uniform(0.5, 2, c)
    x = _f32(rng, (n, h, w, c), 3.0, 1.0)
    if rng.random() < 0.5:
        return bn.forward(x, False), oracles.batchnorm(
            x, bn.params["gamma"], bn.params["beta"], bn.epsilon, bn.buffers["moving_mean"],
            bn.buffers["moving_variance"])
    return bn.forward(x, True), oracles.batchnorm(x, bn.params["gamma"], bn.params["beta"],
                                                  bn.epsilon)


def _softmax_case(rng):
    x = _f32(rng, (int(rng.integers(1, 6)), int(rng.integers(2, 8))), 10.0)
    return softmax(x), oracles.softmax(x)


def _rmsb_case(rng):
    n, h, w = _geom(rng, 3)
    cin, cout = (int(v) for v in rng.integers(1, 6, 2))
    half = max(cin // 2, 1)
    cfg = RmsbConfig(cin, cout, branch_channels=half, use_residual=bool(rng.random() < 0.75),
                     use_depthwise=bool(rng.random() < 0.75), standard_channels=half)
    block = ResidualMultiScaleBlock("rmsb", cfg)
    block.init_params(rng)
    training = bool(rng.random() < 0.5)
    x = _f32(rng, (n, h, w, cin))
    return block.forward(x, training), oracles.rmsb(block, x, training)


def _se_case(rng):
    n, h, w = _geom(rng)
    c, r = int(rng.integers(2, 9)), int(rng.choice([1, 2, 4]))
    block = SqueezeExcitation("se", SeConfig(c, r, use_bias=bool(rng.random() < 0.5)))
    block.init_params(rng)
    x = _f32(rng, (n, h, w, c))
    return block.forward(x), oracles.se(block, x)


@pytest.mark.parametrize("name,case", [
    ("conv2d", _conv_case), ("depthwise", _depthwise_case), ("dense", _dense_case),
    ("batchnorm", _bn_case), ("softmax", _softmax_case), ("rmsb", _rmsb_case),
    ("se", _se_case)])
def test_c5_oracle_equivalence(name, case):
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = 0.0
    for _ in range(CASES):
        ours, ref = case(rng)
        assert ours.dtype == np.float32
        worst = max(worst, oracles.rel_error(ours, ref))
    ok = worst <= 1e-6
    record("5", C5, ok, f"{worst:.1e}", name)
    assert ok


# ---------------------------------------------------------------- 6: split


def test_c6_split_reproduction():
    index = data.DatasetIndex([data.Entry(f"{c}/{i}", c) for c, n in
                               enumerate((513, 1192, 985, 1162)) for i in range(n)])
    split = data.stratified_split(index, seed=42)
    support = split.class_counts("test")
    ok = support == [51, 120, 99, 116] and sum(support) == 386
    record("6", "published class counts give test supports 51/120/99/116 (386)", ok,
           "/".join(map(str, support)))
    assert ok


# ---------------------------------------------------------------- 7: training sanity


@pytest.mark.slow
def test_c7a_overfit_32_samples():
    x, y = data.make_synthetic_dataset(8, 16, seed=1)
    # desk-scale BN momentum so 200 single-batch steps settle the running statistics
    model = build(ModelConfig.reduced(bn_momentum=0.9), seed=42)
    t0 = time.perf_counter()
    train(model, lambda e: data.array_batches(x, y, 32, True, 42, e),
          lambda: data.array_batches(x, y, 32), epochs=200, patience=200,
          optimizer=Adam(1e-3))
    _, acc = run_epoch(model, data.array_batches(x, y, 32))
    ok = acc >= 0.99
    record("7a", "32-sample overfit reaches >= 99% train accuracy within 200 epochs", ok,
           f"accuracy {acc:.3f}, {time.perf_counter() - t0:.0f}s")
    assert ok


@pytest.mark.slow
def test_c7b_synthetic_dataset():
    x, y = data.make_synthetic_dataset(100, 16, seed=0)
    order = np.random.default_rng(0).permutation(len(x))
    tr, va = order[:320], order[320:]
    model = build(ModelConfig.reduced(), seed=42)
    t0 = time.perf_counter()
    log = train(model, lambda e: data.array_batches(x[tr], y[tr], 32, True, 42, e,
                                                    data.AugmentParams()),
                lambda: data.array_batches(x[va], y[va], 32), epochs=30, patience=30,
                optimizer=Adam(3e-3))
    best = max(r.val_acc for r in log.records)
    ok = best >= 0.90
    record("7b", "synthetic 4-class set reaches >= 90% val accuracy within 30 epochs", ok,
           f"best val accuracy {best:.3f}, {time.perf_counter() - t0:.0f}s")
    assert ok


# ---------------------------------------------------------------- 8: optional full run


def test_c8_full_dataset_run(tmp_path):
    root = os.environ.get("LWMSCNN_DATASET")
    desc = "full maize training targets 96.63% +- 2 pp (not gated)"
    if not root:
        record("8", desc, None, "set LWMSCNN_DATASET to a PlantVillage maize root to run")
        pytest.skip("LWMSCNN_DATASET not set")
    out = tmp_path / "run"
    assert cli.main(["train", "--dataset-root", root, "--output-dir", str(out)]) == 0
    assert cli.main(["eval", "--dataset-root", root, "--checkpoint", str(out / "best.lwms"),
                     "--output-dir", str(out)]) == 0
    acc = float(re.search(r'"accuracy": ([0-9.]+)', (out / "report.json").read_text())[1])
    ok = abs(acc * 100 - 96.63) <= 2
    record("8", desc, ok, f"test accuracy {acc:.4f}")


# ---------------------------------------------------------------- 9: determinism


def test_c9_determinism(tmp_path, capsys):
    x, y = data.make_synthetic_dataset(16, 16, seed=3)
    root = data.write_image_folder(tmp_path / "fixture", x, y)
    losses, blobs = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--dataset-root", str(root), "--epochs", "1", "--seed", "42",
                         "--reduced-geometry", "--output-dir", str(out)]) == 0
        printed = capsys.readouterr().out
        losses.append(re.search(r"epoch\s+1\s+train_loss (\S+)", printed)[1])
        blobs.append((out / "best.lwms").read_bytes())
    ok = losses[0] == losses[1] and blobs[0] == blobs[1]
    record("9", "identical first-epoch loss and byte-identical checkpoints", ok,
           f"loss {losses[0]} / {losses[1]}")
    assert ok


# ---------------------------------------------------------------- 10: serialization


def _corrupted(good):
    body = good[:-4]

    def reseal(b):
        return b + struct.pack("<I", zlib.crc32(b))

    return {
        "empty": b"",
        "short": good[:9],
        "bad magic": b"XWMS" + good[4:],
        "bad crc": body + struct.pack("<I", zlib.crc32(body) ^ 1),
        "truncated": good[:-5],
        "bad version": reseal(body[:4] + struct.pack("<H", 2) + body[6:]),
        "huge count": reseal(body[:6] + struct.pack("<I", 0xFFFFFFFF) + body[10:]),
        "zero count with data": reseal(body[:6] + struct.pack("<I", 0) + body[10:]),
        "bad dtype tag": reseal(body[:-25] + b"\x09" + body[-24:]),
        "name runs past end": reseal(body[:10] + struct.pack("<H", 0xFFFF) + body[12:]),
    }


def test_c10_serialization():
    rng = np.random.default_rng(10)
    exact = 0
    for _ in range(1000):
        tensors = {}
        for j in range(int(rng.integers(1, 4))):
            shape = tuple(int(v) for v in rng.integers(1, 5, int(rng.integers(0, 5))))
            dtype = np.float32 if rng.random() < 0.5 else np.float64
            arr = rng.standard_normal(shape).astype(dtype)
            if arr.size and rng.random() < 0.2:
                arr.reshape(-1)[0] = rng.choice([np.nan, np.inf, -np.inf, -0.0])
            tensors[f"t{j}.w"] = arr
        out = decode(encode(tensors))
        exact += list(out) == list(tensors) and all(
            out[k].dtype == v.dtype and out[k].shape == v.shape and
            out[k].tobytes() == v.tobytes() for k, v in tensors.items())
    good = encode({"w": np.arange(3, dtype=np.float64)})
    rejected = 0
    fixtures = _corrupted(good)
    for blob in fixtures.values():
        try:
            decode(blob)
        except WeightFormatError:
            rejected += 1
    ok = exact == 1000 and rejected == len(fixtures)
    record("10", "LWMS round-trips bitwise exact; corrupted headers rejected", ok,
           f"{exact}/1000 exact, {rejected}/{len(fixtures)} rejected")
    assert ok
