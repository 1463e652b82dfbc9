import numpy as np
import pytest

import oracles
from lwmscnn.blocks import (DepthwiseDownsample, ResidualMultiScaleBlock, RmsbConfig, SeConfig,
                            SqueezeExcitation, downsample_forward, plain_stage, rmsb_forward,
                            se_forward)
from lwmscnn.errors import GeometryError, ShapeError

F64 = np.float64


def _block(cfg, seed=0):
    b = ResidualMultiScaleBlock("b", cfg, F64)
    b.init_params(np.random.default_rng(seed))
    return b


@pytest.mark.parametrize("cfg", [
    RmsbConfig(4, 6, branch_channels=2),
    RmsbConfig(4, 4, branch_channels=2),
    RmsbConfig(4, 6, branch_channels=2, use_residual=False),
    RmsbConfig(4, 6, branch_channels=2, use_depthwise=False, standard_channels=2),
])
@pytest.mark.parametrize("training", [False, True])
def test_rmsb_matches_oracle(rng, cfg, training):
    block = _block(cfg)
    x = rng.standard_normal((2, 5, 4, 4))
    assert oracles.rel_error(rmsb_forward(x, block, "train" if training else "infer"),
                             oracles.rmsb(block, x, training)) < 1e-12


def test_rmsb_structure_and_shapes(rng):
    block = _block(RmsbConfig(32, 64, branch_channels=16))
    y = block.forward(rng.standard_normal((1, 8, 8, 32)))
    assert y.shape == (1, 8, 8, 64)
    assert y.min() >= 0
    assert block.cfg.concat_width == 32 + 32 + 16
    assert block.shortcut is not None
    assert _block(RmsbConfig(8, 8, branch_channels=4)).shortcut is None


def test_rmsb_identity_shortcut_passes_input(rng):
    # zero every branch output via zero BN scale/shift on the projection:
    # the block reduces to relu(x)
    block = _block(RmsbConfig(4, 4, branch_channels=2))
    block.project_bn.params["gamma"][:] = 0
    x = rng.standard_normal((1, 3, 3, 4))
    assert np.array_equal(block.forward(x), np.maximum(x, 0))


def test_rmsb_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        _block(RmsbConfig(4, 6)).forward(np.zeros((1, 3, 3, 5)))


@pytest.mark.parametrize("bias", [True, False])
def test_se_matches_oracle(rng, bias):
    block = SqueezeExcitation("se", SeConfig(8, 4, use_bias=bias), F64)
    block.init_params(rng)
    if bias:
        for fc in (block.excite.layers[0], block.excite.layers[2]):
            fc.params["bias"][:] = rng.standard_normal(fc.params["bias"].shape)
    x = rng.standard_normal((3, 4, 4, 8))
    assert oracles.rel_error(se_forward(x, block), oracles.se(block, x)) < 1e-13


def test_se_gate_is_a_per_channel_scale(rng):
    block = SqueezeExcitation("se", SeConfig(8, 4), F64)
    block.init_params(rng)
    x = np.abs(rng.standard_normal((2, 3, 3, 8))) + 0.1
    s = block.attention(x)
    assert s.shape == (2, 8) and np.all((s > 0) & (s < 1))
    assert np.allclose(block.forward(x) / x, s[:, None, None, :])
    assert SeConfig(256, 8).hidden == 32 and SeConfig(4, 8).hidden == 1


def test_se_zero_weights_gives_half():
    block = SqueezeExcitation("se", SeConfig(4, 2), F64)
    x = np.ones((1, 2, 2, 4))
    assert np.allclose(block.forward(x), 0.5)


def test_downsample(rng):
    block = DepthwiseDownsample("down", 3, dtype=F64)
    block.init_params(rng)
    x = rng.standard_normal((2, 7, 6, 3))
    y = downsample_forward(x, block, "train")
    assert y.shape == (2, 4, 3, 3)
    assert oracles.rel_error(y, oracles.downsample(block, x, True)) < 1e-12
    with pytest.raises(GeometryError):
        block.forward(np.zeros((1, 1, 4, 3)))


def test_plain_stage_counts():
    stage = plain_stage("s", 32, 64)
    assert stage.param_count() == 3 * 3 * 32 * 64 + 2 * 64
