"""Command-line entry point: ``dipformer <verb> [flags]``.

Exit codes: 0 success, 1 a check failed, 2 usage or data error. Set
``DIPFORMER_LOG`` (DEBUG, INFO, WARNING, ...) to change log verbosity.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradcheck
from .data import SynthSpec, generate_synthetic, load_manifest, load_sample, save_samples
from .errors import ConfigError, DipformerError, GeometryError, TrainingDivergedError, UsageError
from .fsutil import atomic_write_bytes, atomic_write_text
from .lca import lca_attention_map
from .metrics import binary_report, multiclass_report
from .model import ModelConfig, arm_config, forward, forward_trace, init_params, load_checkpoint, predict
from .ops import softmax
from .tensor import OpCounter, Tensor, no_grad, precision
from .trainer import TrainConfig, run_ablation, run_training

log = logging.getLogger("dipformer")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

# Cityscapes-style colors for up to 19 classes
PALETTE = np.array([
    [128, 64, 128], [244, 35, 232], [70, 70, 70], [102, 102, 156], [190, 153, 153],
    [153, 153, 153], [250, 170, 30], [220, 220, 0], [107, 142, 35], [152, 251, 152],
    [70, 130, 180], [220, 20, 60], [255, 0, 0], [0, 0, 142], [0, 0, 70],
    [0, 60, 100], [0, 80, 100], [0, 0, 230], [119, 11, 32],
], dtype=np.uint8)


def palette(n_cls: int) -> np.ndarray:
    """First ``n_cls`` palette colors, cycling when more are needed."""
    return PALETTE[np.arange(n_cls) % len(PALETTE)]


def colorize(labels: np.ndarray, n_cls: int) -> np.ndarray:
    """HxW labels to HxWx3 uint8; ignored or out-of-range labels become black."""
    out = np.zeros(labels.shape + (3,), np.uint8)
    ok = labels < n_cls
    out[ok] = palette(n_cls)[labels[ok]]
    return out


def heatmap(values: np.ndarray, scale: int = 16) -> np.ndarray:
    """Colormap a 2-D map to HxWx3 uint8, upscaled by pixel repetition."""
    from matplotlib import colormaps

    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    rgb = colormaps["viridis"](norm)[..., :3]
    big = np.kron(rgb, np.ones((scale, scale, 1)))
    return np.rint(big * 255).astype(np.uint8)


def _png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--sizes must list integers, got {text!r}") from None
    if not sizes:
        raise UsageError("--sizes needs at least one size")
    return sizes


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig()
    if getattr(args, "model_config", None):
        cfg = ModelConfig.from_kv(Path(args.model_config).read_text(encoding="utf-8"))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.train_config:
        cfg = TrainConfig.from_kv(Path(args.train_config).read_text(encoding="utf-8"))
    changes = {k: v for k, v in (("seed", args.seed), ("total_steps", args.steps), ("lr0", args.lr)) if v is not None}
    if "total_steps" in changes and cfg.warmup_steps >= changes["total_steps"]:
        changes["warmup_steps"] = changes["total_steps"] // 10
    return cfg.replace(**changes) if changes else cfg


def _load_data(manifest, cfg: ModelConfig):
    samples = load_manifest(manifest)
    for s in samples:
        if s.size != cfg.image_size:
            raise ConfigError(f"sample size {s.size} does not match model image_size {cfg.image_size}")
    return samples


# -- verbs -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(
        image_size=(args.size, args.size),
        n_cls=args.n_cls,
        count=args.count,
        seed=args.seed,
        depth_only_class_fraction=args.depth_only_fraction,
    )
    manifest = save_samples(generate_synthetic(spec), args.out)
    print(f"wrote {spec.count} samples, manifest={manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _model_config(args)
    tcfg = _train_config(args)
    data = _load_data(args.data, cfg)
    log.info("training %d samples for %d steps", len(data), tcfg.total_steps)
    eval_set = _load_data(args.eval_data, cfg) if args.eval_data else None
    result = run_training(cfg, tcfg, data, eval_set, checkpoint_path=args.checkpoint, history_path=args.history)
    for step, loss, miou in result.history:
        print(f"step={step} loss={loss:.6f} miou={miou:.4f}")
    print(f"best_miou={result.best_miou:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    samples = _load_data(args.data, cfg)
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples]) if cfg.uses_depth else None
    labels = np.stack([s.labels for s in samples])
    if args.road_class is None:
        report = multiclass_report(predict(rgb, depth, cfg, params), labels, cfg.n_cls)
    else:
        with no_grad(), precision(cfg.precision):
            logits = forward(Tensor(rgb), None if depth is None else Tensor(depth), cfg, params)
            prob = softmax(Tensor(np.moveaxis(logits.data, 1, -1))).data[..., args.road_class]
        report = binary_report(prob, (labels == args.road_class).astype(np.uint8), n_thresholds=args.thresholds)
    text = report.to_kv()
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(args.out, text)
    if args.json:
        atomic_write_text(args.json, report.to_json())
    return EXIT_OK


def cmd_infer(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    sample = load_sample(args.rgb, args.depth, crop=False)
    if sample.size != cfg.image_size:
        raise ConfigError(f"image {sample.size} does not match checkpoint image_size {cfg.image_size}")
    rgb, depth = Tensor(sample.rgb[None]), Tensor(sample.depth[None])
    with no_grad(), precision(cfg.precision):
        trace = forward_trace(rgb, depth if cfg.uses_depth else None, cfg, params)
    labels = trace.logits.data.argmax(axis=1)[0].astype(np.int64)
    atomic_write_bytes(args.out_mask, _png(colorize(labels, cfg.n_cls)))
    print(f"mask={args.out_mask}")
    if args.out_attn:
        if not cfg.use_lca:
            raise UsageError("this checkpoint has no cross-attention to visualize")
        if not 1 <= args.stage <= cfg.n_stages:
            raise UsageError(f"--stage must be in [1, {cfg.n_stages}]")
        pair, lp = trace.stages[args.stage - 1], trace.lca_params[args.stage - 1]
        with no_grad(), precision(cfg.precision):
            attn = lca_attention_map(pair, lp, args.query)
        atomic_write_bytes(args.out_attn, _png(heatmap(attn)))
        print(f"attention={args.out_attn} stage={args.stage} query={args.query} row_sum={attn.sum():.8f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run_ops = args.ops or not args.end_to_end
    results = []
    if run_ops:
        results += gradcheck.check_all_ops(args.seed)
    if args.end_to_end:
        results.append(gradcheck.check_end_to_end(args.seed))
    for r in results:
        print(r.describe())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}")
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def bench_counts(cfg: ModelConfig, size: int) -> dict[str, float]:
    """Multiply-adds per module for one forward pass at ``size`` x ``size``."""
    if size % 16:
        raise GeometryError(f"bench size {size} is not divisible by 16")
    cfg = cfg.replace(image_size=(size, size))
    params = init_params(cfg)
    rng = np.random.default_rng(cfg.seed)
    with no_grad(), precision(cfg.precision), OpCounter() as oc:
        forward(Tensor(rng.random((1, 3, size, size))), Tensor(rng.random((1, 1, size, size))), cfg, params)
    row = {
        "sao": oc.total("sao"),
        "lca": oc.total("lca"),
        "lca_scores": sum(v for k, v in oc.multiply_adds.items() if k.startswith("lca/") and k.endswith(("/scores", "/mix"))),
        "decoder": oc.total("decoder") + oc.total("head"),
        "total": oc.total(),
    }
    for l in range(1, cfg.n_stages + 1):
        row[f"kv_tokens_s{l}"] = oc.notes.get(f"lca/stage{l}/kv/kv_tokens", 0)
    return row


def cmd_bench(args) -> int:
    sizes = _sizes(args.sizes)
    cfg = _model_config(args)
    rows = []
    for s in sizes:
        log.info("counting multiply-adds at %dx%d", s, s)
        rows.append((s, bench_counts(cfg, s)))
    keys = list(rows[0][1])
    print("size," + ",".join(keys))
    for s, row in rows:
        print(f"{s}," + ",".join(str(int(row[k])) for k in keys))
    base_size, base = rows[0]
    for s, row in rows[1:]:
        px = (s / base_size) ** 2
        for k in ("lca_scores", "decoder"):
            if base[k]:
                print(f"ratio {k} {s}/{base_size} = {row[k] / base[k]:.4f} (pixel ratio {px:.4f})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _model_config(args)
    tcfg = _train_config(args)
    train = _load_data(args.data, base)
    test = _load_data(args.test_data, base) if args.test_data else None
    arms = [a for a in args.arms.split(",") if a]
    for a in arms:
        arm_config(base, a)
    focus = tuple(int(c) for c in args.focus_classes.split(",") if c) if args.focus_classes else ()
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    table = run_ablation(arms, base, tcfg, train, test, focus, seeds)
    sys.stdout.write(table.to_text())
    if args.out:
        atomic_write_text(args.out, table.to_csv())
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dipformer", description="RGB-D segmentation toolkit")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="write a synthetic depth-separable dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-cls", type=int, default=5)
    s.add_argument("--depth-only-fraction", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def training_flags(sp):
        sp.add_argument("--data", required=True, help="training manifest")
        sp.add_argument("--model-config")
        sp.add_argument("--train-config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lr", type=float)

    t = sub.add_parser("train", help="train a model on a manifest")
    training_flags(t)
    t.add_argument("--eval-data")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--history")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--road-class", type=int, help="report binary road metrics for this class")
    e.add_argument("--thresholds", type=int, default=256)
    e.add_argument("--out")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image, optionally dump attention")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--depth", required=True)
    i.add_argument("--out-mask", required=True)
    i.add_argument("--out-attn")
    i.add_argument("--stage", type=int, default=1)
    i.add_argument("--query", type=int, default=0, help="pixel index at stage resolution")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--ops", action="store_true")
    g.add_argument("--end-to-end", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="multiply-add counts per module")
    b.add_argument("--sizes", required=True, help="comma-separated input sizes")
    b.add_argument("--model-config")
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and compare ablation arms")
    training_flags(a)
    a.add_argument("--test-data")
    a.add_argument("--arms", default="baseline,+sao,+lca,+sao&lca")
    a.add_argument("--seeds")
    a.add_argument("--focus-classes")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DIPFORMER_LOG", "WARNING").upper(), format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc} (batch dumped to {exc.dump_path})", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (DipformerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
