import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dipformer import ops
from dipformer.errors import ConfigError, DataError, DegenerateBatchError, DimensionError, GeometryError
from dipformer.tensor import OpCounter, Precision, Tensor, precision


@pytest.fixture(autouse=True)
def verification():
    with precision(Precision.VERIFICATION):
        yield


@pytest.mark.parametrize(
    "size,stride,padding,groups", [(6, 1, 1, 1), (7, 2, 1, 1), (6, 1, 0, 1), (6, 1, 1, 2), (5, 1, 1, 4)]
)
def test_conv2d_matches_loop_oracle(rng, size, stride, padding, groups):
    x = rng.normal(size=(2, 4, size, size))
    w = rng.normal(size=(4, 4 // groups, 3, 3))
    b = rng.normal(size=4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups)
    np.testing.assert_allclose(got.data, oracles.conv2d(x, w, b, stride, padding, groups), atol=1e-12)


def test_conv2d_identity_kernel():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_conv2d_rejects_bad_geometry():
    with pytest.raises(GeometryError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=0)
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))), padding=1)
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_group_norm_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 6, 3, 3)) * 3 + 1
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    got = ops.group_norm(Tensor(x), 3, Tensor(gamma), Tensor(beta))
    np.testing.assert_allclose(got.data, oracles.group_norm(x, 3, gamma, beta), atol=1e-10)


def test_group_norm_needs_divisible_groups():
    with pytest.raises(ConfigError):
        ops.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


def test_max_pool_matches_oracle_and_breaks_ties_first(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    np.testing.assert_array_equal(ops.max_pool2d(Tensor(x), 2).data, oracles.max_pool2d(x, 2))
    t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ops.sum(ops.max_pool2d(t, 2)).backward()
    np.testing.assert_array_equal(t.grad[0, 0], [[1, 0], [0, 0]])


def test_max_pool_rejects_overlap_and_odd_sizes():
    with pytest.raises(ConfigError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 4, 4))), 3, 2)
    with pytest.raises(GeometryError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


@pytest.mark.parametrize("size,p", [(7, 3), (8, 7), (5, 5), (14, 7), (10, 4)])
def test_adaptive_pool_matches_oracle(rng, size, p):
    x = rng.normal(size=(1, 2, size, size + 1))
    got = ops.adaptive_avg_pool2d(Tensor(x), p).data
    np.testing.assert_allclose(got, oracles.adaptive_avg_pool2d(x, p), atol=1e-12)


@given(size=st.integers(1, 40), p=st.integers(1, 40))
def test_adaptive_bins_cover_input(size, p):
    if p > size:
        return
    bins = ops.adaptive_bins(size, p)
    assert bins[0][0] == 0 and bins[-1][1] == size
    covered = set()
    for s, e in bins:
        assert e > s
        covered.update(range(s, e))
    assert covered == set(range(size))


def test_adaptive_pool_rejects_p_larger_than_input():
    with pytest.raises(GeometryError):
        ops.adaptive_avg_pool2d(Tensor(np.zeros((1, 1, 3, 3))), 4)


@pytest.mark.parametrize("out", [(8, 8), (3, 5), (16, 4), (4, 4)])
def test_bilinear_matches_oracle(rng, out):
    x = rng.normal(size=(1, 2, 4, 4))
    got = ops.bilinear_resize(Tensor(x), *out).data
    np.testing.assert_allclose(got, oracles.bilinear_resize(x, *out), atol=1e-12)


@settings(max_examples=25)
@given(h=st.integers(1, 6), w=st.integers(1, 6), oh=st.integers(1, 12), ow=st.integers(1, 12), c=st.floats(-5, 5))
def test_bilinear_preserves_constants(h, w, oh, ow, c):
    with precision(Precision.VERIFICATION):
        y = ops.bilinear_resize(Tensor(np.full((1, 1, h, w), c)), oh, ow).data
    np.testing.assert_allclose(y, c, atol=1e-12)


def test_bilinear_mac_count_is_separable():
    with OpCounter() as oc:
        ops.bilinear_resize(Tensor(np.zeros((2, 3, 4, 5))), 8, 10)
    # two taps along H at input width, then two taps along W at output width
    assert oc.total() == 2 * 2 * 3 * 8 * 5 + 2 * 2 * 3 * 8 * 10


@settings(max_examples=30)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    with precision(Precision.VERIFICATION):
        y = ops.softmax(Tensor(np.array([values]))).data
    assert abs(y.sum() - 1.0) < 1e-12
    assert (y >= 0).all()


def test_softmax_stable_for_large_logits():
    y = ops.softmax(Tensor(np.array([[1000.0, 1000.0]]))).data
    np.testing.assert_allclose(y, [[0.5, 0.5]])


def test_cross_entropy_against_extended_precision(rng):
    logits = rng.normal(size=(1, 4, 8, 8)) * 4
    labels = rng.integers(0, 4, size=(1, 8, 8))
    labels[0, 0, :3] = 255
    got = ops.cross_entropy(Tensor(logits), labels).item()
    assert abs(got - float(oracles.softmax_nll(logits, labels))) <= 1e-6


def test_cross_entropy_errors():
    with pytest.raises(DegenerateBatchError):
        ops.cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 255))
    with pytest.raises(DataError):
        ops.cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 3))


def test_linear_and_matmul_shapes(rng):
    x = Tensor(rng.normal(size=(2, 5, 3)))
    y = ops.linear(x, Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(4)))
    assert y.shape == (2, 5, 4)
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
