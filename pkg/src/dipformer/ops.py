"""Differentiable numpy ops over :class:`~dipformer.tensor.Tensor`.

Each op validates geometry, computes its forward result, reports its
multiply-add count to any active :class:`~dipformer.tensor.OpCounter`, and
records a backward closure. Backward math for the heavier ops lives in
module-level ``_*_backward`` helpers.
"""

from __future__ import annotations

import builtins
import math
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DegenerateBatchError, DimensionError, GeometryError
from .tensor import Tensor, count_macs


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return Tensor.from_op(out, (x,), lambda g: (g * mask,), "relu")


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return Tensor.from_op(out, (x,), lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, backward, "concat")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return Tensor.from_op(
        out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean"
    )


# -- dense algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    count_macs(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight.T + bias``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear expects trailing dim {d_in}, got shape {x.shape}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear bias shape {bias.shape} != ({d_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    count_macs(x2.shape[0] * d_in * d_out)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out.reshape(lead + (d_out,)), parents, backward, "linear")


def pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map over the channel axis of an NCHW tensor."""
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"pointwise expects {weight.shape[1]} channels, got {x.shape[1]}")
    y = linear(permute(x, (0, 2, 3, 1)), weight, bias)
    return permute(y, (0, 3, 1, 2))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


# -- convolution -----------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"conv geometry: ({size} + 2*{padding} - {k}) / {stride} is not a non-negative integer"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    if k == 1:
        win = xp[:, :, : stride * ho : stride, : stride * wo : stride]
        return win.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _conv2d_forward(x, w, stride, padding):
    n, _, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = (cols @ w.reshape(c_out, -1).T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return out, cols


def _conv2d_backward(g, cols, x_shape, w, stride, padding):
    """Gradients of a single-group convolution w.r.t. input and weight."""
    n, c_in, h, wd = x_shape
    c_out, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    gw = (gm.T @ cols).reshape(w.shape)
    dcols = (gm @ w.reshape(c_out, -1)).reshape(n, ho, wo, c_in, k, k)
    dxp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return gx, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of an NCHW input with a square odd kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and weight, got {x.shape}, {weight.shape}")
    c_out, c_in_g, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    c_in = x.shape[1]
    if c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise DimensionError(
            f"conv2d: input has {c_in} channels but weight expects {c_in_g * groups} ({groups} groups)"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({c_out},)")

    step_in, step_out = c_in // groups, c_out // groups
    outs, caches = [], []
    for gi in range(groups):
        xs = x.data[:, gi * step_in : (gi + 1) * step_in]
        ws = weight.data[gi * step_out : (gi + 1) * step_out]
        o, cols = _conv2d_forward(xs, ws, stride, padding)
        outs.append(o)
        caches.append(cols)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    count_macs(out.size * c_in_g * k * k)

    def backward(g):
        gx = np.empty_like(x.data)
        gw = np.empty_like(weight.data)
        for gi in range(groups):
            o_sl = slice(gi * step_out, (gi + 1) * step_out)
            i_sl = slice(gi * step_in, (gi + 1) * step_in)
            gxs, gws = _conv2d_backward(
                np.ascontiguousarray(g[:, o_sl]),
                caches[gi],
                (x.shape[0], step_in) + x.shape[2:],
                weight.data[o_sl],
                stride,
                padding,
            )
            gx[:, i_sl] = gxs
            gw[o_sl] = gws
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv2d")


# -- normalization ------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups <= 0 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm affine params must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    count_macs(2 * x.size)

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
        return dx.reshape(x.shape), ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "group_norm")


# -- pooling -------------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Non-overlapping window maximum; ties resolve to the first row-major position."""
    stride = k if stride is None else stride
    if k != stride:
        raise ConfigError(f"max_pool2d supports non-overlapping windows only (k={k}, stride={stride})")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise GeometryError(f"max_pool2d: {h}x{w} not divisible by stride {stride}")
    ho, wo = h // stride, w // stride
    win = x.data.reshape(n, c, ho, stride, wo, stride).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, stride, stride).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "max_pool2d")


@lru_cache(maxsize=256)
def adaptive_bins(size: int, p: int) -> tuple[tuple[int, int], ...]:
    """Bin edges ``[floor(i*size/p), ceil((i+1)*size/p))`` for ``i < p``."""
    return tuple(((i * size) // p, -((-(i + 1) * size) // p)) for i in range(p))


@lru_cache(maxsize=256)
def _pool_matrix(size: int, p: int, dtype: str) -> np.ndarray:
    m = np.zeros((p, size), dtype=dtype)
    for i, (s, e) in enumerate(adaptive_bins(size, p)):
        m[i, s:e] = 1.0 / (e - s)
    m.setflags(write=False)
    return m


def adaptive_avg_pool2d(x: Tensor, p: int) -> Tensor:
    n, c, h, w = x.shape
    if p < 1:
        raise ConfigError(f"adaptive_avg_pool2d: P must be >= 1, got {p}")
    if p > h or p > w:
        raise GeometryError(f"adaptive_avg_pool2d: P={p} exceeds input {h}x{w}")
    ph = _pool_matrix(h, p, x.dtype.str)
    pw = _pool_matrix(w, p, x.dtype.str)
    out = ph @ x.data @ pw.T
    span_h = builtins.sum(e - s for s, e in adaptive_bins(h, p))
    span_w = builtins.sum(e - s for s, e in adaptive_bins(w, p))
    count_macs(n * c * span_h * span_w)

    def backward(g):
        return (ph.T @ g @ pw,)

    return Tensor.from_op(out, (x,), backward, "adaptive_avg_pool2d")


# -- resampling ---------------------------------------------------------------------

@lru_cache(maxsize=256)
def _bilinear_matrix(out_size: int, in_size: int, dtype: str) -> np.ndarray:
    """Row ``d`` holds the two-tap weights for output index ``d`` (align_corners=False)."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for d in range(out_size):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of an NCHW tensor with half-pixel centers."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    ah = _bilinear_matrix(out_h, h, x.dtype.str)
    aw = _bilinear_matrix(out_w, w, x.dtype.str)
    out = ah @ x.data @ aw.T
    # separable two-tap interpolation: rows first, then columns
    count_macs(2 * n * c * out_h * w + 2 * n * c * out_h * out_w)

    def backward(g):
        return (ah.T @ g @ aw,)

    return Tensor.from_op(out, (x,), backward, "bilinear_resize")


# -- losses ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean negative log-likelihood over pixels whose label is not ``ignore_label``.

    ``logits`` is N x K x H x W and ``labels`` an integer N x H x W mask.
    """
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy expects N x K x H x W logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("every pixel in the batch is ignored")
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise DataError(f"labels outside [0, {k}) found")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n_valid

    def backward(g):
        grad = e / s
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * valid[:, None] * (g / n_valid)
        return (grad.astype(logits.dtype, copy=False),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")

