"""Comparison position embeddings and pixel-wise depth fusion baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .initializers import normal, trunc_normal, zeros
from .tensor import Tensor


class PeKind(enum.Enum):
    SINCOS = "sincos"
    LEARNABLE = "learnable"
    IMPLICIT = "implicit"
    DEPTH_ADD = "depth_add"
    DEPTH_CONCAT = "depth_concat"
    DEPTH_SAO = "depth_sao"

    @property
    def is_depth_fusion(self) -> bool:
        return self in (PeKind.DEPTH_ADD, PeKind.DEPTH_CONCAT)

    @property
    def is_positional(self) -> bool:
        return self in (PeKind.SINCOS, PeKind.LEARNABLE, PeKind.IMPLICIT)


def sincos_pe(h: int, w: int, channels: int) -> Tensor:
    """Fixed 2-D sine/cosine table of shape 1 x C x h x w.

    Channels form (sin, cos) pairs; the first half of the pairs encodes the
    row index and the rest the column index. Pair ``i`` within an axis uses
    frequency ``1 / 10000^(2i/C)``.
    """
    if channels % 2:
        raise ConfigError(f"sine/cosine embedding needs an even channel count, got {channels}")
    n_pairs = channels // 2
    row_pairs = (n_pairs + 1) // 2
    table = np.zeros((channels, h, w))
    rows = np.arange(h)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w)[None, :]
    for pair in range(n_pairs):
        i = pair if pair < row_pairs else pair - row_pairs
        pos = rows if pair < row_pairs else cols
        omega = 1.0 / 10000 ** (2 * i / channels)
        table[2 * pair] = np.sin(pos * omega)
        table[2 * pair + 1] = np.cos(pos * omega)
    return Tensor(table[None])


def init_learnable_pe(rng: np.random.Generator, h: int, w: int, channels: int) -> Tensor:
    return normal(rng, (1, channels, h, w), std=0.02)


def learnable_pe(h: int, w: int, channels: int, table: Tensor) -> Tensor:
    if table.shape != (1, channels, h, w):
        raise ConfigError(f"learnable table has shape {table.shape}, expected (1, {channels}, {h}, {w})")
    return table


@dataclass(eq=False)
class ImplicitPeParams:
    weight: Tensor  # C x 1 x 3 x 3 depthwise kernel
    bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def init_implicit_pe(rng: np.random.Generator, channels: int) -> ImplicitPeParams:
    return ImplicitPeParams(trunc_normal(rng, (channels, 1, 3, 3)), zeros(channels))


def implicit_pe(x: Tensor, params: ImplicitPeParams) -> Tensor:
    """Residual depthwise 3x3 convolution, ``x + dwconv(x)``."""
    c = x.shape[1]
    if params.weight.shape != (c, 1, 3, 3):
        raise ConfigError(f"implicit PE kernel {params.weight.shape} does not fit {c} channels")
    return ops.add(x, ops.conv2d(x, params.weight, params.bias, stride=1, padding=1, groups=c))


@dataclass(eq=False)
class DepthFuseParams:
    proj_weight: Tensor  # C x 1 x 1 x 1
    proj_bias: Tensor
    fuse_weight: Tensor | None = None  # C x 2C, concat only
    fuse_bias: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"proj.weight": self.proj_weight, "proj.bias": self.proj_bias}
        if self.fuse_weight is not None:
            out["fuse.weight"] = self.fuse_weight
            out["fuse.bias"] = self.fuse_bias
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor]) -> "DepthFuseParams":
        return cls(t["proj.weight"], t["proj.bias"], t.get("fuse.weight"), t.get("fuse.bias"))


def init_depth_fuse(rng: np.random.Generator, channels: int, kind: PeKind, depth_channels: int = 1) -> DepthFuseParams:
    proj_w, proj_b = trunc_normal(rng, (channels, depth_channels, 1, 1)), zeros(channels)
    if kind is PeKind.DEPTH_CONCAT:
        return DepthFuseParams(proj_w, proj_b, trunc_normal(rng, (channels, 2 * channels)), zeros(channels))
    return DepthFuseParams(proj_w, proj_b)


def depth_fuse_baseline(r: Tensor, d: Tensor, kind: PeKind, params: DepthFuseParams) -> Tensor:
    """Pixel-wise depth fusion: ``r + proj(d)`` or ``linear([r, proj(d)])``."""
    if r.shape[0] != d.shape[0] or r.shape[2:] != d.shape[2:]:
        raise DimensionError(f"RGB {r.shape} and depth {d.shape} differ in batch or spatial size")
    dp = ops.conv2d(d, params.proj_weight, params.proj_bias)
    if kind is PeKind.DEPTH_ADD:
        return ops.add(r, dp)
    if kind is PeKind.DEPTH_CONCAT:
        if params.fuse_weight is None:
            raise ConfigError("concat fusion needs a fuse linear")
        return ops.pointwise(ops.concat([r, dp], axis=1), params.fuse_weight, params.fuse_bias)
    raise ConfigError(f"{kind} is not a pixel-wise depth fusion")


def as_kind(kind: PeKind | str) -> PeKind:
    return kind if isinstance(kind, PeKind) else PeKind(kind)
