import numpy as np
import pytest

import oracles
from lwmscnn.errors import GeometryError, ShapeError
from lwmscnn.layers import (BatchNorm, Conv2D, Dense, DepthwiseConv2D, Dropout, GlobalAvgPool,
                            ReLU, Sigmoid, Softmax, conv2d_forward, conv_output_size,
                            depthwise_conv2d_forward, dropout_forward, sigmoid, softmax)


@pytest.mark.parametrize("size,k,s,pad,expected", [
    (224, 3, 2, "same", 112), (112, 3, 2, "same", 56), (5, 3, 2, "same", 3),
    (7, 3, 1, "valid", 5), (7, 3, 2, "valid", 3), (1, 5, 1, "same", 1)])
def test_output_size(size, k, s, pad, expected):
    assert conv_output_size(size, k, s, pad) == expected


def test_geometry_errors():
    with pytest.raises(GeometryError):
        conv_output_size(2, 3, 1, "valid")
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 1)))
    with pytest.raises(ShapeError):
        depthwise_conv2d_forward(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2)))


def test_conv_hand_example():
    # 3x3 ones kernel on a 3x3 ramp with zero padding: each output sums its neighbourhood
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 3, 3, 1)
    w = np.ones((3, 3, 1, 1))
    out = conv2d_forward(x, w)[0, :, :, 0]
    assert np.array_equal(out, [[12, 21, 16], [27, 45, 33], [24, 39, 28]])


def test_same_padding_extra_goes_bottom_right():
    # 4x4 input, stride 2, 3x3: total pad 1, all of it at the bottom/right
    x = np.zeros((1, 4, 4, 1))
    x[0, 0, 0, 0] = 1.0
    w = np.zeros((3, 3, 1, 1))
    w[0, 0, 0, 0] = 1.0
    out = conv2d_forward(x, w, stride=2)
    assert out.shape == (1, 2, 2, 1)
    assert out[0, 0, 0, 0] == 1.0


@pytest.mark.parametrize("stride,padding,k", [(1, "same", 3), (2, "same", 3), (1, "valid", 3),
                                              (2, "same", 5), (1, "same", 1)])
def test_conv_matches_oracle(rng, stride, padding, k):
    x = rng.standard_normal((2, 6, 5, 3))
    w = rng.standard_normal((k, k, 3, 4))
    assert oracles.rel_error(conv2d_forward(x, w, stride, padding),
                             oracles.conv2d(x, w, stride, padding)) < 1e-12


@pytest.mark.parametrize("stride,padding,k", [(1, "same", 3), (2, "same", 3), (1, "same", 5),
                                              (1, "valid", 3)])
def test_depthwise_matches_oracle(rng, stride, padding, k):
    x = rng.standard_normal((2, 6, 7, 3))
    w = rng.standard_normal((k, k, 3))
    assert oracles.rel_error(depthwise_conv2d_forward(x, w, stride, padding),
                             oracles.depthwise(x, w, stride, padding)) < 1e-12


def test_depthwise_has_no_channel_mixing(rng):
    x = rng.standard_normal((1, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3))
    base = depthwise_conv2d_forward(x, w)
    x2 = x.copy()
    x2[..., 1] += 10.0
    moved = depthwise_conv2d_forward(x2, w)
    assert np.array_equal(base[..., 0], moved[..., 0])
    assert np.array_equal(base[..., 2], moved[..., 2])


def test_layer_param_counts():
    assert Conv2D("c", 3, 32, 3).param_count() == 864
    assert Conv2D("c", 3, 32, 3, use_bias=True).param_count() == 896
    assert DepthwiseConv2D("d", 64, 5).param_count() == 1600
    assert Dense("d", 256, 192).param_count() == 49_344
    assert BatchNorm("b", 64).param_count() == 128


def test_dense_and_activations(rng):
    layer = Dense("d", 5, 3, dtype=np.float64)
    layer.init_params(rng)
    layer.params["bias"][:] = rng.standard_normal(3)
    x = rng.standard_normal((4, 5))
    assert oracles.rel_error(layer.forward(x), oracles.dense(x, layer.params["kernel"],
                                                             layer.params["bias"])) < 1e-12
    assert np.array_equal(ReLU("r").forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    big = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(big)
    assert np.all(np.isfinite(s)) and s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert oracles.rel_error(Sigmoid("s").forward(big[1:4]), oracles.sigmoid(big[1:4])) < 1e-15


def test_softmax_stability_and_oracle(rng):
    x = np.array([[1000.0, 1000.0, 1000.0, 1000.0], [0.0, 0.0, 0.0, 0.0]])
    assert np.allclose(softmax(x), 0.25)
    y = rng.standard_normal((5, 4)) * 10
    p = Softmax("s").forward(y)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert oracles.rel_error(p, oracles.softmax(y)) < 1e-14


def test_batchnorm_train_and_infer(rng):
    bn = BatchNorm("bn", 3, momentum=0.9, dtype=np.float64)
    bn.params["gamma"][:] = [1.0, 2.0, 0.5]
    bn.params["beta"][:] = [0.0, -1.0, 3.0]
    x = rng.standard_normal((4, 3, 3, 3)) * 2 + 5
    y = bn.forward(x, training=True)
    assert oracles.rel_error(y, oracles.batchnorm(x, bn.params["gamma"], bn.params["beta"],
                                                  1e-3)) < 1e-13
    flat = x.reshape(-1, 3)
    assert np.allclose(bn.buffers["moving_mean"], 0.1 * flat.mean(axis=0))
    assert np.allclose(bn.buffers["moving_variance"], 0.9 + 0.1 * flat.var(axis=0))
    before = {k: v.copy() for k, v in bn.buffers.items()}
    yi = bn.forward(x, training=False)
    assert all(np.array_equal(before[k], bn.buffers[k]) for k in before)
    assert oracles.rel_error(yi, oracles.batchnorm(x, bn.params["gamma"], bn.params["beta"],
                                                   1e-3, before["moving_mean"],
                                                   before["moving_variance"])) < 1e-13


def test_batchnorm_constant_input_gives_beta():
    bn = BatchNorm("bn", 2, dtype=np.float64)
    bn.params["beta"][:] = [0.3, -0.7]
    y = bn.forward(np.full((2, 3, 3, 2), 4.0), training=True)
    assert np.allclose(y[..., 0], 0.3) and np.allclose(y[..., 1], -0.7)


def test_batchnorm_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        BatchNorm("bn", 3).forward(np.zeros((1, 2, 2, 4)))
    with pytest.raises(ValueError):
        BatchNorm("bn", 3, momentum=1.0)


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(0)
    x = np.ones((200, 500))
    y, mask = dropout_forward(x, 0.4, True, rng)
    kept = y != 0
    assert np.allclose(y[kept], 1 / 0.6)
    assert kept.mean() == pytest.approx(0.6, abs=0.01)
    assert y.mean() == pytest.approx(1.0, abs=0.01)
    z, m = dropout_forward(x, 0.4, False, rng)
    assert z is x and m is None
    with pytest.raises(ValueError):
        Dropout("d", 1.0)


def test_global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    assert oracles.rel_error(GlobalAvgPool("g").forward(x), oracles.global_avg_pool(x)) < 1e-14
