"""DiPFormer assembly: pyramid, per-stage cross-attention, decoder, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .decoder import (
    DecoderConfig,
    DecoderParams,
    HeadParams,
    decode,
    init_decoder,
    init_head,
    project_head,
    upsample_logits,
)
from .errors import ConfigError, FormatError
from .fsutil import atomic_write_bytes
from .lca import LcaParams, init_lca, lca_forward
from .pe import (
    DepthFuseParams,
    ImplicitPeParams,
    PeKind,
    depth_fuse_baseline,
    implicit_pe,
    init_depth_fuse,
    init_implicit_pe,
    init_learnable_pe,
    learnable_pe,
    sincos_pe,
)
from .sao import PyramidParams, StagePair, check_pyramid_inputs, init_pyramid, run_pyramid, stem
from .tensor import Precision, Tensor, precision, region

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (32, 64, 160, 256)
    stage_heads: tuple[int, ...] = (1, 2, 5, 8)
    pool_size: int = 7
    n_cls: int = 19
    decoder_channels: int = 128
    decoder_hidden: int = 128
    pe_kind: PeKind = PeKind.DEPTH_SAO
    use_lca: bool = True
    use_decoder: bool = True
    chain_stages: bool = True
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    precision: Precision = Precision.STANDARD

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("stage_channels", tuple(int(c) for c in self.stage_channels))
        set_("stage_heads", tuple(int(h) for h in self.stage_heads))
        set_("image_size", tuple(int(s) for s in self.image_size))
        set_("pe_kind", PeKind(self.pe_kind))
        set_("precision", Precision(self.precision))
        n = len(self.stage_channels)
        if not 1 <= n <= 4:
            raise ConfigError(f"1 to 4 stages supported, got {n}")
        if len(self.stage_heads) != n:
            raise ConfigError("stage_heads must list one head count per stage")
        dims = self.stage_channels + self.stage_heads + (self.pool_size, self.n_cls)
        dims += (self.decoder_channels, self.decoder_hidden) + self.image_size
        if min(dims) < 1:
            raise ConfigError("all model dimensions must be positive")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if c % h:
                raise ConfigError(f"stage width {c} not divisible by {h} heads")
        factor = 2**n
        if self.image_size[0] % factor or self.image_size[1] % factor:
            raise ConfigError(f"image size {self.image_size} not divisible by {factor}")
        if self.pe_kind is PeKind.SINCOS and self.stage_channels[0] % 2:
            raise ConfigError("sine/cosine embedding needs an even stage-1 width")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def uses_depth_branch(self) -> bool:
        return self.pe_kind is PeKind.DEPTH_SAO or self.use_lca

    @property
    def uses_depth(self) -> bool:
        return self.uses_depth_branch or self.pe_kind.is_depth_fusion

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- key=value serialization ---------------------------------------------------
    def to_kv(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, (PeKind, Precision)):
                v = v.value
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "ModelConfig":
        raw = parse_kv(text)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            v = raw.pop(f.name)
            default = f.default
            if isinstance(default, tuple):
                kwargs[f.name] = tuple(int(x) for x in v.split(",") if x)
            elif isinstance(default, bool):
                if v not in ("true", "false"):
                    raise ConfigError(f"{f.name} must be true or false, got {v!r}")
                kwargs[f.name] = v == "true"
            elif isinstance(default, int):
                kwargs[f.name] = int(v)
            else:
                kwargs[f.name] = v
        raw.pop("config_hash", None)
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_kv().encode("utf-8")).hexdigest()


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


ARMS: dict[str, dict] = {
    "baseline": {"pe_kind": PeKind.IMPLICIT, "use_lca": False},
    "+sao": {"pe_kind": PeKind.DEPTH_SAO, "use_lca": False},
    "+lca": {"pe_kind": PeKind.IMPLICIT, "use_lca": True},
    "+sao&lca": {"pe_kind": PeKind.DEPTH_SAO, "use_lca": True},
}


def arm_config(base: ModelConfig, arm: str) -> ModelConfig:
    """Config for a named ablation arm.

    ``arm`` is one of :data:`ARMS`, or ``pe=<kind>`` for a position-embedding
    arm (no cross-attention), optionally suffixed ``/no-decoder``.
    """
    name, _, suffix = arm.partition("/")
    if name in ARMS:
        changes = dict(ARMS[name])
    elif name.startswith("pe="):
        changes = {"pe_kind": PeKind(name[3:]), "use_lca": False}
    else:
        raise ConfigError(f"unknown ablation arm {arm!r}")
    if suffix == "no-decoder":
        changes["use_decoder"] = False
    elif suffix:
        raise ConfigError(f"unknown arm modifier {suffix!r}")
    return base.replace(**changes)


# -- parameters ------------------------------------------------------------------

def _prefixed(prefix: str, tensors: dict[str, Tensor]) -> Params:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}


def _sub(params: Params, prefix: str) -> dict[str, Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def pool_for_stage(cfg: ModelConfig, h: int, w: int) -> int:
    return min(cfg.pool_size, h, w)


def decoder_config(cfg: ModelConfig) -> DecoderConfig:
    return DecoderConfig(cfg.stage_channels, cfg.decoder_channels, cfg.decoder_hidden, cfg.n_cls)


def init_params(cfg: ModelConfig, seed: int | None = None) -> Params:
    """Fresh parameters: truncated-normal(0.02) weights, zero biases, unit GN gains."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c1 = cfg.stage_channels[0]
    h1, w1 = cfg.image_size[0] // 2, cfg.image_size[1] // 2
    params: Params = {}
    with precision(cfg.precision):
        pyramid = init_pyramid(
            rng,
            cfg.stage_channels,
            depth_branch=cfg.uses_depth_branch,
            fuse=cfg.pe_kind is PeKind.DEPTH_SAO,
            chain=cfg.chain_stages,
        )
        params.update(pyramid.tensors())
        kind = cfg.pe_kind
        if kind is PeKind.LEARNABLE:
            params["pe.learnable.table"] = init_learnable_pe(rng, h1, w1, c1)
        elif kind is PeKind.IMPLICIT:
            params.update(_prefixed("pe.implicit", init_implicit_pe(rng, c1).tensors()))
        elif kind.is_depth_fusion:
            params.update(_prefixed("pe.depth", init_depth_fuse(rng, c1, kind).tensors()))
        if cfg.use_lca:
            for l, (c, heads) in enumerate(zip(cfg.stage_channels, cfg.stage_heads), start=1):
                params.update(_prefixed(f"lca{l}", init_lca(rng, c, heads, cfg.pool_size).tensors()))
        if cfg.use_decoder:
            params.update(_prefixed("decoder", init_decoder(rng, decoder_config(cfg)).tensors()))
        else:
            params.update(_prefixed("head", init_head(rng, cfg.stage_channels[-1], cfg.n_cls).tensors()))
    return params


def parameter_count(params: Params) -> int:
    return int(sum(t.size for t in params.values()))


# -- forward ---------------------------------------------------------------------

@dataclass
class ForwardTrace:
    stages: list[StagePair]
    features: list[Tensor]
    decoder_logits: Tensor
    logits: Tensor
    lca_params: list[LcaParams] = field(default_factory=list)


def forward_trace(rgb: Tensor, depth: Tensor | None, cfg: ModelConfig, params: Params) -> ForwardTrace:
    check_pyramid_inputs(rgb, depth if cfg.uses_depth else None, cfg.n_stages)
    if cfg.uses_depth and depth is None:
        raise ConfigError(f"{cfg.pe_kind.value} model with use_lca={cfg.use_lca} needs a depth input")
    h, w = rgb.shape[2:]
    kind = cfg.pe_kind
    pyramid = PyramidParams.from_tensors(params, cfg.n_stages)

    with region("sao"):
        r0, d0 = stem(rgb, depth if cfg.uses_depth_branch else None, pyramid)
    if kind.is_depth_fusion:
        with region("pe"):
            r0 = depth_fuse_baseline(r0, depth, kind, DepthFuseParams.from_tensors(_sub(params, "pe.depth")))
    with region("sao"):
        pairs = run_pyramid(r0, d0, pyramid, cfg.chain_stages)

    if kind.is_positional:
        first = pairs[0]
        c1, h1, w1 = first.fused.shape[1:]
        with region("pe"):
            if kind is PeKind.SINCOS:
                fused = ops.add(first.fused, sincos_pe(h1, w1, c1))
            elif kind is PeKind.LEARNABLE:
                fused = ops.add(first.fused, learnable_pe(h1, w1, c1, params["pe.learnable.table"]))
            else:
                t = _sub(params, "pe.implicit")
                fused = implicit_pe(first.fused, ImplicitPeParams(t["weight"], t["bias"]))
        pairs[0] = StagePair(first.r_f, first.d_f, fused)

    features, lca_params = [], []
    for l, pair in enumerate(pairs, start=1):
        feat = pair.fused
        if cfg.use_lca:
            sh, sw = pair.r_f.shape[2:]
            lp = LcaParams.from_tensors(
                _sub(params, f"lca{l}"), cfg.stage_heads[l - 1], pool_for_stage(cfg, sh, sw)
            )
            with region(f"lca/stage{l}"):
                feat = ops.add(feat, lca_forward(pair, lp))
            lca_params.append(lp)
        features.append(feat)

    if cfg.use_decoder:
        dec = decode(features, decoder_config(cfg), DecoderParams.from_tensors(_sub(params, "decoder"), cfg.n_stages))
    else:
        t = _sub(params, "head")
        dec = project_head(features, HeadParams(t["weight"], t["bias"]))
    with region("upsample"):
        logits = upsample_logits(dec, h, w)
    return ForwardTrace(pairs, features, dec, logits, lca_params)


def forward(rgb: Tensor, depth: Tensor | None, cfg: ModelConfig, params: Params) -> Tensor:
    """Full-resolution N x n_cls x H x W logits."""
    return forward_trace(rgb, depth, cfg, params).logits


def predict(rgb, depth, cfg: ModelConfig, params: Params, batch_size: int = 8) -> np.ndarray:
    """Arg-max labels (N x H x W) for numpy inputs, evaluated without a tape."""
    from .tensor import no_grad

    rgb = np.asarray(rgb)
    depth = None if depth is None else np.asarray(depth)
    out = []
    with no_grad(), precision(cfg.precision):
        for i in range(0, rgb.shape[0], batch_size):
            d = None if depth is None else Tensor(depth[i : i + batch_size])
            logits = forward(Tensor(rgb[i : i + batch_size]), d, cfg, params)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out).astype(np.int64)


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"DIPF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


def encode_checkpoint(params: Params, cfg: ModelConfig) -> bytes:
    cfg_block = (cfg.to_kv() + f"config_hash={cfg.config_hash()}\n").encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_block)), cfg_block]
    out.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    return b"".join(out)


def save_checkpoint(params: Params, cfg: ModelConfig, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, cfg))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, expected: ModelConfig | None = None) -> tuple[Params, ModelConfig]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a DIPF checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        text = r.take(cfg_len, "config block").decode("utf-8")
        cfg = ModelConfig.from_kv(text)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"unreadable config block: {exc}", cfg_at) from None
    stored_hash = parse_kv(text).get("config_hash")
    if stored_hash != cfg.config_hash():
        raise FormatError("config hash does not match the stored config", cfg_at)
    if expected is not None and expected.config_hash() != cfg.config_hash():
        raise ConfigError("checkpoint was written for a different model config")

    (count,) = r.unpack("<I", "tensor count")
    shapes = expected_shapes(cfg)
    params: Params = {}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB", f"header of {name}")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}", at)
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        dtype = _DTYPES[code]
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize, f"payload of {name}")
        if shapes.get(name) != tuple(dims):
            raise FormatError(f"tensor {name} with shape {dims} is not part of this config", at)
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    if list(params) != list(shapes):
        missing = sorted(set(shapes) - set(params))
        raise FormatError(f"checkpoint tensors do not match config (missing {missing[:3]})")
    return params, cfg


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Params, ModelConfig]:
    return decode_checkpoint(Path(path).read_bytes(), expected)
