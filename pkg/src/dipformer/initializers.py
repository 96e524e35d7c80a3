"""Parameter initialization draws."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, get_precision


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> Tensor:
    """N(0, std^2) with draws beyond ``bound`` standard deviations redrawn."""
    values = rng.standard_normal(shape)
    bad = np.abs(values) > bound
    while bad.any():
        values[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(values) > bound
    return Tensor(values * std, requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_precision().dtype), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_precision().dtype), requires_grad=True)
