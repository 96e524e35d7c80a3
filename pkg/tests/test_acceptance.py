"""One test per acceptance criterion. Each prints a CRITERION line."""

import time

import numpy as np
import pytest

import oracles
from dipformer import cli, gradcheck
from dipformer.data import SynthSpec, generate_synthetic, rgb_only_iou_bound
from dipformer.metrics import (
    binary_metrics_at,
    confusion_matrix,
    metrics_from_precision_recall,
    multiclass_miou_macc,
    threshold_curve,
)
from dipformer.model import ModelConfig, decode_checkpoint, encode_checkpoint, forward, forward_trace, init_params
from dipformer.tensor import Tensor, no_grad
from dipformer.trainer import TrainConfig, run_ablation, run_training

# (method, MaxF, PRE, REC, FNR) from the urban road benchmark comparison table
ROAD_TABLE = [
    ("CLCFNet", 96.38, 96.38, 96.39, 3.61),
    ("PLB-RD", 97.42, 97.30, 97.54, 2.46),
    ("3MT-RoadSeg", 96.60, 96.46, 96.73, 3.27),
    ("LRDNet+", 96.95, 96.88, 97.02, 2.98),
    ("SNE-RoadSeg", 96.75, 96.90, 96.61, 3.39),
    ("NIM-RTFNet", 96.02, 96.43, 95.62, 4.38),
    ("DFM-RTFNet", 94.78, 96.62, 96.93, 3.07),
    ("SNE-RoadSeg+", 97.50, 97.41, 97.58, 2.42),
    ("USNet", 96.89, 96.51, 97.27, 2.73),
    ("SNE-RoadSegV2", 97.55, 97.57, 97.53, 2.47),
    ("EpurateNet", 97.09, 96.76, 97.43, 2.76),
    ("RoadFormer", 97.50, 97.16, 97.84, 2.16),
    ("RoadFormer+", 97.56, 97.43, 97.69, 2.31),
    ("DiPFormer", 97.57, 97.34, 97.79, 2.21),
]


def test_criterion_1_published_metric_arithmetic(acceptance):
    start = time.perf_counter()
    bad = []
    for name, max_f, pre, rec, fnr in ROAD_TABLE:
        f1, fnr_calc = metrics_from_precision_recall(pre, rec)
        if abs(f1 - max_f) > 0.05:
            bad.append(f"{name} MaxF {max_f} vs 2PR/(P+R)={f1:.3f}")
        if abs(fnr_calc - fnr) > 0.01:
            bad.append(f"{name} FNR {fnr} vs 100-REC={fnr_calc:.2f}")
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 1.0
    detail = f"{len(ROAD_TABLE) - len({b.split()[0] for b in bad})}/{len(ROAD_TABLE)} rows consistent in {elapsed:.3f}s"
    acceptance(1, ok, detail + ("; inconsistent published rows: " + "; ".join(bad) if bad else ""))
    assert ok, bad


def test_criterion_2_gradient_suite(acceptance):
    start = time.perf_counter()
    results = gradcheck.check_all_ops() + [gradcheck.check_end_to_end()]
    elapsed = time.perf_counter() - start
    failed = [r.describe() for r in results if not r.passed]
    worst_op = max(r.worst_rel_error for r in results[:-1])
    ok = not failed and elapsed < 300 and all(r.tolerance == 1e-5 for r in results[:-1]) and results[-1].tolerance == 1e-4
    acceptance(2, ok, f"{len(results) - 1} ops worst {worst_op:.2e} (tol 1e-5), end-to-end "
                      f"{results[-1].worst_rel_error:.2e} (tol 1e-4), {elapsed:.1f}s")
    assert ok, failed


def test_criterion_3_complexity(acceptance):
    start = time.perf_counter()
    cfg = ModelConfig()
    sizes = (64, 128, 192, 256)
    counts = {s: cli.bench_counts(cfg, s) for s in sizes}
    problems = []
    for s in sizes:
        for l in range(1, 5):
            side = s >> l
            want = min(cfg.pool_size, side) ** 2
            got = counts[s][f"kv_tokens_s{l}"]
            if got != want:
                problems.append(f"size {s} stage {l}: {got} tokens, expected {want}")
            if side >= cfg.pool_size and got != cfg.pool_size**2:
                problems.append(f"size {s} stage {l}: {got} != P^2")

    def stage_scores(size, stages):
        from dipformer.tensor import OpCounter

        c = cfg.replace(image_size=(size, size))
        p = init_params(c)
        rng = np.random.default_rng(0)
        with no_grad(), OpCounter() as oc:
            forward(Tensor(rng.random((1, 3, size, size))), Tensor(rng.random((1, 1, size, size))), c, p)
        return sum(oc.multiply_adds[f"lca/stage{l}/{k}"] for l in stages for k in ("scores", "mix"))

    ratios = {
        "lca scores 256/128 (all stages)": counts[256]["lca_scores"] / counts[128]["lca_scores"],
        "lca scores 128/64 (stages 1-3)": stage_scores(128, (1, 2, 3)) / stage_scores(64, (1, 2, 3)),
        "decoder 128/64": counts[128]["decoder"] / counts[64]["decoder"],
        "decoder 256/128": counts[256]["decoder"] / counts[128]["decoder"],
    }
    problems += [f"{k} = {v:.4f}" for k, v in ratios.items() if abs(v - 4.0) > 0.05]
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 120
    acceptance(3, ok, "K/V tokens = P^2 = 49 wherever the stage is at least P wide (4x4 stage at 64 px "
                      f"uses 16); ratios {', '.join(f'{k}={v:.3f}' for k, v in ratios.items())}; {elapsed:.1f}s")
    assert ok, problems


def test_criterion_4_shape_contract(acceptance):
    cfg = ModelConfig(n_cls=19)
    rng = np.random.default_rng(0)
    with no_grad():
        trace = forward_trace(Tensor(rng.random((1, 3, 64, 64))), Tensor(rng.random((1, 1, 64, 64))), cfg, init_params(cfg))
    sides = [f.shape[2:] for f in trace.features]
    ok = (
        sides == [(32, 32), (16, 16), (8, 8), (4, 4)]
        and [p.r_f.shape[2:] for p in trace.stages] == sides
        and trace.decoder_logits.shape == (1, 19, 16, 16)
        and trace.logits.shape == (1, 19, 64, 64)
    )
    acceptance(4, ok, f"stages {[f'{h}x{w}' for h, w in sides]}, decoder {trace.decoder_logits.shape[1:]}, "
                      f"output {trace.logits.shape[1:]}")
    assert ok


@pytest.mark.slow
def test_criterion_5_overfit(acceptance):
    data = generate_synthetic(SynthSpec(image_size=(64, 64), count=4, seed=0))
    cfg = ModelConfig(n_cls=5)
    tcfg = TrainConfig(lr0=1e-3, warmup_steps=20, total_steps=300, eval_every=50, seed=0)
    start = time.perf_counter()
    result = run_training(cfg, tcfg, data)
    elapsed = time.perf_counter() - start
    final_miou = result.history[-1][2]
    thirds = [float(np.median(part)) for part in np.array_split(np.array(result.losses), 3)]
    ok = final_miou >= 95 and thirds[0] > thirds[1] > thirds[2] and elapsed < 600
    acceptance(5, ok, f"training mIoU {final_miou:.2f} after 300 steps, median loss by thirds "
                      f"{thirds[0]:.4f} > {thirds[1]:.4f} > {thirds[2]:.4f}, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_6_depth_effectiveness(acceptance):
    data = generate_synthetic(SynthSpec(image_size=(32, 32), count=200, seed=7, depth_only_class_fraction=1.0))
    train, test = data[:160], data[160:]
    pair = (2, 3)
    bound = rgb_only_iou_bound(test, pair)
    base = ModelConfig(
        stage_channels=(16, 32, 32, 64), stage_heads=(1, 2, 2, 4), n_cls=5,
        decoder_channels=32, decoder_hidden=32, image_size=(32, 32),
    )
    tcfg = TrainConfig(lr0=2e-3, warmup_steps=40, total_steps=800, batch_size=8, eval_every=800)
    start = time.perf_counter()
    table = run_ablation(["baseline", "+sao", "+lca", "+sao&lca"], base, tcfg, train, test, pair, seeds=(0, 1, 2))
    elapsed = time.perf_counter() - start
    print(table.to_text())
    m = {r.arm: r for r in table.rows}
    a = m["baseline"].focus_iou <= bound + 5
    b = m["+sao&lca"].focus_iou - m["baseline"].focus_iou >= 20
    c = (
        m["baseline"].miou <= m["+sao"].miou
        and m["baseline"].miou <= m["+lca"].miou
        and m["+sao"].miou <= m["+sao&lca"].miou
        and m["+lca"].miou <= m["+sao&lca"].miou
    )
    ok = a and b and c and elapsed < 7200
    acceptance(6, ok, f"(a) baseline pair IoU {m['baseline'].focus_iou:.1f} vs RGB-only bound {bound:.1f}+5: {a}; "
                      f"(b) full arm pair IoU {m['+sao&lca'].focus_iou:.1f} (gain "
                      f"{m['+sao&lca'].focus_iou - m['baseline'].focus_iou:.1f}): {b}; (c) median mIoU "
                      + " / ".join(f"{r.arm} {r.miou:.1f}" for r in table.rows) + f": {c}; {elapsed:.0f}s")
    assert ok


def test_criterion_7_checkpoint_round_trip(acceptance):
    cfg = ModelConfig(n_cls=19)
    params = init_params(cfg, 11)
    loaded, cfg2 = decode_checkpoint(encode_checkpoint(params, cfg))
    rng = np.random.default_rng(7)
    identical = 0
    with no_grad():
        for _ in range(20):
            rgb, depth = Tensor(rng.random((1, 3, 64, 64))), Tensor(rng.random((1, 1, 64, 64)))
            identical += np.array_equal(forward(rgb, depth, cfg, params).data, forward(rgb, depth, cfg2, loaded).data)
    ok = identical == 20 and cfg2 == cfg
    acceptance(7, ok, f"{identical}/20 post-load forwards bit-identical")
    assert ok


def _run_all_verbs(root):
    """Every CLI verb with a fixed seed; returns {artifact: bytes}."""
    import contextlib
    import io

    root.mkdir()
    (root / "model.cfg").write_text(
        "stage_channels=8,16\nstage_heads=1,2\npool_size=3\nn_cls=5\n"
        "decoder_channels=8\ndecoder_hidden=8\nimage_size=32,32\n"
    )
    data, ck = root / "data", root / "ck.dipf"
    calls = {
        "synth": ["synth", "--out", str(data), "--count", "4", "--size", "32", "--seed", "3"],
        "train": ["train", "--data", str(data / "manifest.tsv"), "--model-config", str(root / "model.cfg"),
                  "--seed", "3", "--steps", "8", "--lr", "3e-3", "--checkpoint", str(ck), "--history", str(root / "h.csv")],
        "eval": ["eval", "--checkpoint", str(ck), "--data", str(data / "manifest.tsv"),
                 "--out", str(root / "r.txt"), "--json", str(root / "r.json")],
        "infer": ["infer", "--checkpoint", str(ck), "--rgb", str(data / "00000_rgb.png"),
                  "--depth", str(data / "00000_depth.png"), "--out-mask", str(root / "m.png"),
                  "--out-attn", str(root / "a.png"), "--stage", "2", "--query", "5"],
        "gradcheck": ["gradcheck", "--ops", "--end-to-end", "--seed", "3"],
        "bench": ["bench", "--sizes", "64,128", "--seed", "3"],
        "ablate": ["ablate", "--data", str(data / "manifest.tsv"), "--model-config", str(root / "model.cfg"),
                   "--seed", "3", "--steps", "3", "--arms", "baseline,+sao&lca", "--out", str(root / "ab.csv")],
    }
    artifacts, codes = {}, {}
    for verb, argv in calls.items():
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            codes[verb] = cli.main(argv)
        artifacts[f"{verb}:stdout"] = buf.getvalue().replace(str(root), "<root>").encode()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            artifacts[str(path.relative_to(root))] = path.read_bytes()
    return artifacts, codes


def test_criterion_8_cli_determinism(tmp_path, acceptance):
    first, codes1 = _run_all_verbs(tmp_path / "one")
    second, codes2 = _run_all_verbs(tmp_path / "two")
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    verbs_ok = all(c == 0 for c in codes1.values()) and codes1 == codes2
    ok = not differing and verbs_ok
    acceptance(8, ok, f"{len(codes1)} verbs, {len(first)} artifacts compared byte-for-byte"
                      + (f"; differing: {differing}" if differing else "") + (f"; exit codes {codes1}" if not verbs_ok else ""))
    assert ok


def test_criterion_9_metric_oracles(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for trial in range(1000):
        h, w = rng.integers(1, 9, size=2)
        prob = np.round(rng.random((h, w)), int(rng.integers(1, 3)))
        gt = (rng.random((h, w)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        gt.flat[rng.integers(gt.size)] = 1
        t = float(rng.choice([rng.random(), round(rng.random(), 1)]))
        got = binary_metrics_at(prob, gt, t)
        want = oracles.binary_metrics(prob, gt, t)
        if any(abs(a - b) > 1e-12 for a, b in zip(got, want)):
            mismatches += 1
        n_thr = int(rng.integers(2, 12))
        curve = [(c.tp, c.fp, c.tn, c.fn) for _, c in threshold_curve(prob, gt, n_thr)]
        want_curve = [oracles.binary_counts(prob >= th, gt) for th in np.linspace(0, 1, n_thr)]
        if curve != want_curve:
            mismatches += 1

        n_cls = int(rng.integers(2, 7))
        lab = rng.integers(0, n_cls, size=(h, w))
        lab[rng.random((h, w)) < 0.15] = 255
        lab.flat[rng.integers(lab.size)] = rng.integers(0, n_cls)
        pred = rng.integers(0, n_cls, size=(h, w))
        pred[rng.random((h, w)) < 0.05] = 255
        cm = confusion_matrix(pred, lab, n_cls)
        tp, fp, fn = oracles.per_class_counts(pred, lab, n_cls)
        counts_ok = (
            list(np.diag(cm[:, :n_cls])) == tp
            and list(cm[:, :n_cls].sum(0) - np.diag(cm[:, :n_cls])) == fp
            and list(cm.sum(1) - np.diag(cm[:, :n_cls])) == fn
        )
        miou, macc, _ = multiclass_miou_macc(pred, lab, n_cls)
        o_miou, o_macc = oracles.miou_macc(pred, lab, n_cls)
        if not counts_ok or abs(miou - o_miou) > 1e-9 or abs(macc - o_macc) > 1e-9:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    acceptance(9, ok, f"1000 random instances (binary, sweep, multi-class): {mismatches} mismatches, {elapsed:.1f}s")
    assert ok
