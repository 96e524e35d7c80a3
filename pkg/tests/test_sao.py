import numpy as np
import pytest

from dipformer.errors import ConfigError, DataError, DimensionError, GeometryError
from dipformer.sao import (
    conv_block,
    gn_groups,
    init_pyramid,
    init_sao_stage,
    sao_pyramid_forward,
    sao_stage_forward,
)
from dipformer.tensor import Precision, Tensor, precision


@pytest.mark.parametrize("c,g", [(32, 8), (64, 8), (160, 8), (4, 4), (12, 4), (10, 2)])
def test_gn_groups(c, g):
    assert gn_groups(c) == g


def test_stage_halves_resolution(rng):
    params = init_sao_stage(rng, 4, 8)
    pair = sao_stage_forward(Tensor(rng.random((2, 4, 8, 8))), Tensor(rng.random((2, 4, 8, 8))), params)
    assert pair.r_f.shape == pair.d_f.shape == pair.fused.shape == (2, 8, 4, 4)


def test_branches_share_weights(rng):
    params = init_sao_stage(rng, 4, 8)
    x = Tensor(rng.random((1, 4, 8, 8)))
    pair = sao_stage_forward(x, x, params)
    np.testing.assert_array_equal(pair.r_f.data, pair.d_f.data)


def test_fused_is_linear_of_sum(rng):
    with precision(Precision.VERIFICATION):
        params = init_sao_stage(rng, 2, 4)
        pair = sao_stage_forward(Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((1, 2, 4, 4))), params)
        s = pair.r_f.data + pair.d_f.data
        want = np.einsum("oc,nchw->nohw", params.fuse_weight.data, s) + params.fuse_bias.data[None, :, None, None]
    np.testing.assert_allclose(pair.fused.data, want, atol=1e-12)


def test_conv_block_has_residual(rng):
    # with every conv weight zero and GN beta zero the units output relu(0)=0,
    # so the block returns the pooled first unit exactly
    params = init_sao_stage(rng, 2, 2)
    for w in params.conv_weights:
        w.data[:] = 0
    out = conv_block(Tensor(rng.random((1, 2, 4, 4))), params)
    np.testing.assert_array_equal(out.data, 0)


def test_pyramid_shapes_and_errors(rng):
    params = init_pyramid(rng, (4, 8, 8, 16))
    pairs = sao_pyramid_forward(Tensor(rng.random((1, 3, 32, 32))), Tensor(rng.random((1, 1, 32, 32))), params)
    assert [p.fused.shape[2] for p in pairs] == [16, 8, 4, 2]
    with pytest.raises(GeometryError):
        sao_pyramid_forward(Tensor(rng.random((1, 3, 24, 24))), Tensor(rng.random((1, 1, 24, 24))), params)
    with pytest.raises(DimensionError):
        sao_pyramid_forward(Tensor(rng.random((1, 3, 32, 32))), Tensor(rng.random((1, 1, 16, 16))), params)
    with pytest.raises(DataError):
        sao_pyramid_forward(Tensor(rng.random((1, 3, 32, 32))), Tensor(2 + rng.random((1, 1, 32, 32))), params)


def test_channel_mismatch(rng):
    params = init_sao_stage(rng, 4, 8)
    with pytest.raises(ConfigError):
        conv_block(Tensor(rng.random((1, 3, 8, 8))), params)


def test_unchained_pyramid_resizes_stem(rng):
    params = init_pyramid(rng, (4, 8), chain=False)
    assert params.stages[1].in_channels == 4
    pairs = sao_pyramid_forward(Tensor(rng.random((1, 3, 16, 16))), Tensor(rng.random((1, 1, 16, 16))), params, chain=False)
    assert pairs[1].fused.shape == (1, 8, 4, 4)
