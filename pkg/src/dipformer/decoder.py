"""All-MLP decoder: unify widths, resample to H/4, concatenate, classify per pixel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, GeometryError
from .initializers import trunc_normal, zeros
from .tensor import Tensor, region


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: tuple[int, ...]
    unify_channels: int = 128
    hidden: int = 128
    n_cls: int = 19

    def __post_init__(self):
        if not self.in_channels or min(self.in_channels) < 1:
            raise ConfigError("decoder needs at least one positive input width")
        if min(self.unify_channels, self.hidden, self.n_cls) < 1:
            raise ConfigError("decoder widths and class count must be positive")


@dataclass(eq=False)
class DecoderParams:
    unify_weights: list[Tensor]
    unify_biases: list[Tensor]
    hidden_weight: Tensor
    hidden_bias: Tensor
    cls_weight: Tensor
    cls_bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for l, (w, b) in enumerate(zip(self.unify_weights, self.unify_biases), start=1):
            out[f"unify{l}.weight"] = w
            out[f"unify{l}.bias"] = b
        out.update({
            "hidden.weight": self.hidden_weight,
            "hidden.bias": self.hidden_bias,
            "cls.weight": self.cls_weight,
            "cls.bias": self.cls_bias,
        })
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, Tensor], n_stages: int) -> "DecoderParams":
        return cls(
            [t[f"unify{l}.weight"] for l in range(1, n_stages + 1)],
            [t[f"unify{l}.bias"] for l in range(1, n_stages + 1)],
            t["hidden.weight"],
            t["hidden.bias"],
            t["cls.weight"],
            t["cls.bias"],
        )


def init_decoder(rng: np.random.Generator, cfg: DecoderConfig) -> DecoderParams:
    c, m = cfg.unify_channels, cfg.hidden
    cat = c * len(cfg.in_channels)
    return DecoderParams(
        [trunc_normal(rng, (c, cin)) for cin in cfg.in_channels],
        [zeros(c) for _ in cfg.in_channels],
        trunc_normal(rng, (m, cat)),
        zeros(m),
        trunc_normal(rng, (cfg.n_cls, m)),
        zeros(cfg.n_cls),
    )


def _check_features(features: list[Tensor], widths: tuple[int, ...]) -> tuple[int, int]:
    if len(features) != len(widths):
        raise DimensionError(f"decoder expects {len(widths)} scales, got {len(features)}")
    n = features[0].shape[0]
    for l, (f, c) in enumerate(zip(features, widths), start=1):
        if f.shape[0] != n:
            raise DimensionError(f"stage {l} batch {f.shape[0]} differs from stage 1 batch {n}")
        if f.shape[1] != c:
            raise DimensionError(f"stage {l} has {f.shape[1]} channels, decoder expects {c}")
    h1, w1 = features[0].shape[2:]
    return h1 // 2, w1 // 2


def decode(features: list[Tensor], cfg: DecoderConfig, params: DecoderParams) -> Tensor:
    """Logits at a quarter of the input resolution (half of stage 1's)."""
    th, tw = _check_features(features, cfg.in_channels)
    with region("decoder"):
        unified = []
        for f, w, b in zip(features, params.unify_weights, params.unify_biases):
            y = ops.pointwise(f, w, b)
            unified.append(ops.bilinear_resize(y, th, tw))
        x = ops.concat(unified, axis=1)
        x = ops.relu(ops.pointwise(x, params.hidden_weight, params.hidden_bias))
        return ops.pointwise(x, params.cls_weight, params.cls_bias)


@dataclass(eq=False)
class HeadParams:
    """Decoder-off stand-in: one 1x1 projection of the deepest stage."""

    weight: Tensor
    bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def init_head(rng: np.random.Generator, in_channels: int, n_cls: int) -> HeadParams:
    return HeadParams(trunc_normal(rng, (n_cls, in_channels)), zeros(n_cls))


def project_head(features: list[Tensor], params: HeadParams) -> Tensor:
    th, tw = features[0].shape[2] // 2, features[0].shape[3] // 2
    with region("head"):
        logits = ops.pointwise(features[-1], params.weight, params.bias)
        return ops.bilinear_resize(logits, th, tw)


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    lh, lw = logits.shape[2:]
    if h != 4 * lh or w != 4 * lw:
        raise GeometryError(f"target {h}x{w} is not 4x the logits' {lh}x{lw}")
    return ops.bilinear_resize(logits, h, w)
