import numpy as np
import pytest

from dipformer import gradcheck, ops


@pytest.mark.parametrize("name", list(gradcheck.OP_CASES))
def test_op_gradients_match_finite_differences(name):
    result = gradcheck.check_op(name)
    assert result.passed, result.describe()
    assert result.tolerance == 1e-5


def test_corrupted_conv_backward_is_caught(monkeypatch):
    real = ops._conv2d_backward

    def corrupted(*args):
        gx, gw = real(*args)
        return gx * 1.01, gw

    monkeypatch.setattr(ops, "_conv2d_backward", corrupted)
    result = gradcheck.check_op("conv2d")
    assert not result.passed
    assert "conv2d" in result.describe() and "FAIL" in result.describe()


def test_end_to_end_gradients():
    result = gradcheck.check_end_to_end(seed=0)
    assert result.passed, result.describe()
    assert result.tolerance == 1e-4


def test_relative_error_definition():
    err = gradcheck.relative_error(np.array([1.1]), np.array([1.0]))
    assert err[0] == pytest.approx(0.1 / (1.0 + 1e-8))
