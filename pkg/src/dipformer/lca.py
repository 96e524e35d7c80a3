"""Depth linear cross-attention.

Queries come from every pixel of the depth feature; keys and values come
from the RGB feature after adaptive average pooling to a fixed P x P grid, so
each query attends over P^2 tokens no matter how large the stage is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, GeometryError, UsageError
from .initializers import trunc_normal, zeros
from .sao import StagePair
from .tensor import Tensor, note, region

_PROJECTIONS = ("q", "k", "v", "out")


@dataclass(eq=False)
class LcaParams:
    weights: dict[str, Tensor]
    biases: dict[str, Tensor]
    num_heads: int
    pool_size: int
    scale: float | None = None

    def __post_init__(self):
        c = self.channels
        if self.num_heads < 1 or c % self.num_heads:
            raise ConfigError(f"{c} channels not divisible by {self.num_heads} heads")
        if self.pool_size < 1:
            raise ConfigError("pool size must be positive")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(c // self.num_heads)

    @property
    def channels(self) -> int:
        return self.weights["q"].shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in _PROJECTIONS:
            out[f"{name}.weight"] = self.weights[name]
            out[f"{name}.bias"] = self.biases[name]
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor], num_heads: int, pool_size: int) -> "LcaParams":
        return cls(
            {n: t[f"{n}.weight"] for n in _PROJECTIONS},
            {n: t[f"{n}.bias"] for n in _PROJECTIONS},
            num_heads,
            pool_size,
        )


def init_lca(rng: np.random.Generator, channels: int, num_heads: int, pool_size: int) -> LcaParams:
    weights = {n: trunc_normal(rng, (channels, channels)) for n in _PROJECTIONS}
    biases = {n: zeros(channels) for n in _PROJECTIONS}
    return LcaParams(weights, biases, num_heads, pool_size)


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 3, 1)), (n, h * w, c))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, c = x.shape
    return ops.permute(ops.reshape(x, (n, t, heads, c // heads)), (0, 2, 1, 3))


def _check(pair: StagePair, params: LcaParams) -> None:
    if pair.d_f is None:
        raise ConfigError("cross-attention needs a depth feature")
    if pair.r_f.shape != pair.d_f.shape:
        raise DimensionError(f"RGB/depth features differ: {pair.r_f.shape} vs {pair.d_f.shape}")
    n, c, h, w = pair.r_f.shape
    if c != params.channels:
        raise DimensionError(f"LCA params expect {params.channels} channels, got {c}")
    if params.pool_size**2 > h * w:
        raise GeometryError(f"P^2 = {params.pool_size ** 2} exceeds the {h}x{w} stage")


def attend(pair: StagePair, params: LcaParams) -> tuple[Tensor, Tensor]:
    """Return the N x C x h x w output and the N x heads x hw x P^2 attention."""
    _check(pair, params)
    n, c, h, w = pair.r_f.shape
    heads, p = params.num_heads, params.pool_size
    W, B = params.weights, params.biases
    with region("q"):
        q = _split_heads(ops.linear(_tokens(pair.d_f), W["q"], B["q"]), heads)
    with region("kv"):
        pooled = _tokens(ops.adaptive_avg_pool2d(pair.r_f, p))
        k = _split_heads(ops.linear(pooled, W["k"], B["k"]), heads)
        v = _split_heads(ops.linear(pooled, W["v"], B["v"]), heads)
        note("kv_tokens", k.shape[2])
    with region("scores"):
        scores = ops.mul(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), params.scale)
        attn = ops.softmax(scores)
    with region("mix"):
        mixed = ops.matmul(attn, v)
    merged = ops.reshape(ops.permute(mixed, (0, 2, 1, 3)), (n, h * w, c))
    with region("out"):
        out = ops.linear(merged, W["out"], B["out"])
    out = ops.permute(ops.reshape(out, (n, h, w, c)), (0, 3, 1, 2))
    return out, attn


def lca_forward(pair: StagePair, params: LcaParams) -> Tensor:
    """Cross-attention output; the caller adds it onto ``pair.fused``."""
    return attend(pair, params)[0]


def lca_attention_map(pair: StagePair, params: LcaParams, query_index: int, sample: int = 0) -> np.ndarray:
    """Head-averaged attention row of one query pixel, reshaped to P x P."""
    h, w = pair.r_f.shape[2:]
    if not 0 <= query_index < h * w:
        raise UsageError(f"query index {query_index} outside [0, {h * w})")
    _, attn = attend(pair, params)
    row = attn.data[sample, :, query_index, :].mean(axis=0)
    return row.reshape(params.pool_size, params.pool_size)
