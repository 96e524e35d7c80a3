"""Depth spatial-aware optimization: a shared-weight ConvBlock pyramid.

Each stage runs the same three conv3x3 + GroupNorm units over the RGB and the
depth branch (one parameter set, two inputs), halves the resolution once with
a 2x2 max-pool after the first unit, adds a residual from the pooled feature,
and fuses the two branches with ``Linear(R_F + D_F)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DataError, DimensionError, GeometryError
from .initializers import ones, trunc_normal, zeros
from .tensor import Tensor, region


def gn_groups(channels: int) -> int:
    """GroupNorm group count: 8 where possible, per-channel below 8 channels."""
    if channels < 8:
        return channels
    return 8 if channels % 8 == 0 else math.gcd(8, channels)


@dataclass(eq=False)
class SaoStageParams:
    """One stage's ConvBlock, shared by the RGB and depth branches."""

    conv_weights: list[Tensor]
    conv_biases: list[Tensor]
    gn_gammas: list[Tensor]
    gn_betas: list[Tensor]
    fuse_weight: Tensor | None = None
    fuse_bias: Tensor | None = None
    groups: int = field(default=0)

    def __post_init__(self):
        if len(self.conv_weights) != 3:
            raise ConfigError("a ConvBlock has exactly three convolutions")
        if not self.groups:
            self.groups = gn_groups(self.out_channels)
        if self.fuse_weight is not None and self.fuse_weight.shape[1] != self.out_channels:
            raise ConfigError("fuse linear input width must equal the stage's out_channels")

    @property
    def in_channels(self) -> int:
        return self.conv_weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv_weights[0].shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i in range(3):
            out[f"conv{i + 1}.weight"] = self.conv_weights[i]
            out[f"conv{i + 1}.bias"] = self.conv_biases[i]
            out[f"gn{i + 1}.gamma"] = self.gn_gammas[i]
            out[f"gn{i + 1}.beta"] = self.gn_betas[i]
        if self.fuse_weight is not None:
            out["fuse.weight"] = self.fuse_weight
            out["fuse.bias"] = self.fuse_bias
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor]) -> "SaoStageParams":
        return cls(
            conv_weights=[t[f"conv{i}.weight"] for i in (1, 2, 3)],
            conv_biases=[t[f"conv{i}.bias"] for i in (1, 2, 3)],
            gn_gammas=[t[f"gn{i}.gamma"] for i in (1, 2, 3)],
            gn_betas=[t[f"gn{i}.beta"] for i in (1, 2, 3)],
            fuse_weight=t.get("fuse.weight"),
            fuse_bias=t.get("fuse.bias"),
        )


def init_sao_stage(rng: np.random.Generator, in_channels: int, out_channels: int, fuse: bool = True) -> SaoStageParams:
    widths = [(out_channels, in_channels), (out_channels, out_channels), (out_channels, out_channels)]
    return SaoStageParams(
        conv_weights=[trunc_normal(rng, (co, ci, 3, 3)) for co, ci in widths],
        conv_biases=[zeros(out_channels) for _ in widths],
        gn_gammas=[ones(out_channels) for _ in widths],
        gn_betas=[zeros(out_channels) for _ in widths],
        fuse_weight=trunc_normal(rng, (out_channels, out_channels)) if fuse else None,
        fuse_bias=zeros(out_channels) if fuse else None,
    )


@dataclass
class StagePair:
    """RGB feature, depth feature (None for RGB-only stages) and their fusion."""

    r_f: Tensor
    d_f: Tensor | None
    fused: Tensor


def _unit(x: Tensor, params: SaoStageParams, i: int) -> Tensor:
    y = ops.conv2d(x, params.conv_weights[i], params.conv_biases[i], stride=1, padding=1)
    y = ops.group_norm(y, params.groups, params.gn_gammas[i], params.gn_betas[i])
    return ops.relu(y)


def conv_block(x: Tensor, params: SaoStageParams) -> Tensor:
    """Three conv3x3+GN units, max-pool after the first, residual to the third."""
    if x.shape[1] != params.in_channels:
        raise ConfigError(f"stage expects {params.in_channels} channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise GeometryError(f"stage input {h}x{w} must have even height and width")
    y = ops.max_pool2d(_unit(x, params, 0), 2, 2)
    skip = y
    y = _unit(y, params, 1)
    y = _unit(y, params, 2)
    return ops.add(y, skip)


def fuse(r_f: Tensor, d_f: Tensor, params: SaoStageParams) -> Tensor:
    if params.fuse_weight is None:
        raise ConfigError("stage has no fuse linear")
    return ops.pointwise(ops.add(r_f, d_f), params.fuse_weight, params.fuse_bias)


def sao_stage_forward(r_in: Tensor, d_in: Tensor, params: SaoStageParams) -> StagePair:
    if r_in.shape != d_in.shape:
        raise ConfigError(f"RGB and depth stage inputs differ: {r_in.shape} vs {d_in.shape}")
    r_f = conv_block(r_in, params)
    d_f = conv_block(d_in, params)
    return StagePair(r_f, d_f, fuse(r_f, d_f, params))


@dataclass(eq=False)
class PyramidParams:
    """Input projections plus the per-stage ConvBlocks."""

    rgb_stem_weight: Tensor
    rgb_stem_bias: Tensor
    stages: list[SaoStageParams]
    depth_stem_weight: Tensor | None = None
    depth_stem_bias: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"stem.rgb.weight": self.rgb_stem_weight, "stem.rgb.bias": self.rgb_stem_bias}
        if self.depth_stem_weight is not None:
            out["stem.depth.weight"] = self.depth_stem_weight
            out["stem.depth.bias"] = self.depth_stem_bias
        for l, stage in enumerate(self.stages, start=1):
            out.update({f"stage{l}.{k}": v for k, v in stage.tensors().items()})
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor], n_stages: int) -> "PyramidParams":
        stages = []
        for l in range(1, n_stages + 1):
            prefix = f"stage{l}."
            stages.append(SaoStageParams.from_tensors({k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}))
        return cls(
            rgb_stem_weight=t["stem.rgb.weight"],
            rgb_stem_bias=t["stem.rgb.bias"],
            stages=stages,
            depth_stem_weight=t.get("stem.depth.weight"),
            depth_stem_bias=t.get("stem.depth.bias"),
        )


def init_pyramid(
    rng: np.random.Generator,
    channels: tuple[int, ...],
    depth_branch: bool = True,
    fuse: bool = True,
    chain: bool = True,
) -> PyramidParams:
    c0 = channels[0]
    rgb_w, rgb_b = trunc_normal(rng, (c0, 3, 1, 1)), zeros(c0)
    dep_w = trunc_normal(rng, (c0, 1, 1, 1)) if depth_branch else None
    dep_b = zeros(c0) if depth_branch else None
    stages = []
    for l, c in enumerate(channels):
        c_in = (channels[l - 1] if l else c0) if chain else c0
        stages.append(init_sao_stage(rng, c_in, c, fuse=fuse))
    return PyramidParams(rgb_w, rgb_b, stages, dep_w, dep_b)


def stem(rgb: Tensor, depth: Tensor | None, params: PyramidParams) -> tuple[Tensor, Tensor | None]:
    r = ops.conv2d(rgb, params.rgb_stem_weight, params.rgb_stem_bias)
    d = None
    if depth is not None and params.depth_stem_weight is not None:
        d = ops.conv2d(depth, params.depth_stem_weight, params.depth_stem_bias)
    return r, d


def check_pyramid_inputs(rgb: Tensor, depth: Tensor | None, n_stages: int) -> None:
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise DimensionError(f"RGB input must be N x 3 x H x W, got {rgb.shape}")
    n, _, h, w = rgb.shape
    factor = 2**n_stages
    if h % factor or w % factor:
        raise GeometryError(f"input {h}x{w} must be divisible by {factor}")
    if depth is not None:
        if depth.shape != (n, 1, h, w):
            raise DimensionError(f"depth must be {n} x 1 x {h} x {w}, got {depth.shape}")
        if depth.size and (depth.data.min() < 0 or depth.data.max() > 1):
            raise DataError("depth must be normalized to [0, 1]")


def run_pyramid(
    r0: Tensor,
    d0: Tensor | None,
    params: PyramidParams,
    chain: bool = True,
) -> list[StagePair]:
    """Run every stage from stem features ``r0`` / ``d0``.

    Stages carrying a fuse linear fuse both branches; stages without one
    (RGB-only or non-SAO arms) pass ``r_f`` through as the fused feature.
    """
    pairs: list[StagePair] = []
    r, d = r0, d0
    for l, stage in enumerate(params.stages, start=1):
        if not chain and l > 1:
            h, w = r0.shape[2] >> (l - 1), r0.shape[3] >> (l - 1)
            r = ops.bilinear_resize(r0, h, w)
            d = ops.bilinear_resize(d0, h, w) if d0 is not None else None
        with region(f"stage{l}"):
            r_f = conv_block(r, stage)
            d_f = conv_block(d, stage) if d is not None else None
            if stage.fuse_weight is not None:
                if d_f is None:
                    raise ConfigError("a fusing stage needs the depth branch")
                fused = fuse(r_f, d_f, stage)
            else:
                fused = r_f
        pairs.append(StagePair(r_f, d_f, fused))
        r, d = r_f, d_f
    return pairs


def sao_pyramid_forward(rgb: Tensor, depth: Tensor, params: PyramidParams, chain: bool = True) -> list[StagePair]:
    check_pyramid_inputs(rgb, depth, len(params.stages))
    with region("sao"):
        r0, d0 = stem(rgb, depth, params)
        return run_pyramid(r0, d0, params, chain)
