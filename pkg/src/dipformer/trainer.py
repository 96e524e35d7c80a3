"""Cross-entropy training with AdamW and warmup + cosine decay, plus ablations."""

from __future__ import annotations

import dataclasses
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from . import ops
from .data import IGNORE_LABEL, SegSample, random_hflip, stack
from .errors import ConfigError, DataError, TrainingDivergedError, UsageError
from .fsutil import atomic_write_text
from .metrics import confusion_matrix, scores_from_confusion
from .model import ModelConfig, Params, arm_config, forward, init_params, parameter_count, parse_kv, predict, save_checkpoint
from .tensor import Tensor, precision


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 6e-5
    weight_decay: float = 0.05
    warmup_steps: int = 10
    total_steps: int = 300
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 50
    flip_p: float = 0.5

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive")
        if self.weight_decay < 0 or not 0 <= self.flip_p <= 1:
            raise ConfigError("weight_decay must be >= 0 and flip_p in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_kv(cls, text: str) -> "TrainConfig":
        raw = parse_kv(text)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in raw:
                kwargs[f.name] = type(f.default)(raw.pop(f.name))
        if raw:
            raise ConfigError(f"unknown training keys: {sorted(raw)}")
        return cls(**kwargs)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr0, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise UsageError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr0 * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def cross_entropy_loss(logits: Tensor, labels, ignore_label: int = IGNORE_LABEL) -> Tensor:
    return ops.cross_entropy(logits, np.asarray(labels, dtype=np.int64), ignore_label)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def no_decay(name: str) -> bool:
    """GroupNorm gains and shifts are not weight-decayed."""
    return ".gn" in name


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: AdamWState, lr: float, wd: float) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    if set(grads) != set(params):
        raise UsageError("gradients and parameters name different tensors")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise UsageError(f"optimizer moments for {name} do not match its shape")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd and not no_decay(name):
            p.data -= lr * wd * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    losses: list[float]
    lrs: list[float]
    history: list[tuple[int, float, float]]  # (step, loss, mIoU) at eval points
    best_miou: float

    def history_csv(self) -> str:
        evals = {s: m for s, _, m in self.history}
        lines = ["step,loss,lr,miou"]
        for i, (loss, lr) in enumerate(zip(self.losses, self.lrs), start=1):
            miou = f"{evals[i]:.6f}" if i in evals else ""
            lines.append(f"{i},{loss:.9g},{lr:.9g},{miou}")
        return "\n".join(lines) + "\n"


def evaluate(params: Params, cfg: ModelConfig, samples: list[SegSample], batch_size: int = 8):
    """(mIoU, mAcc, per-class IoU) over ``samples``."""
    rgb, depth, labels = stack(samples)
    if labels is None:
        raise DataError("evaluation needs labelled samples")
    pred = predict(rgb, depth if cfg.uses_depth else None, cfg, params, batch_size)
    return scores_from_confusion(confusion_matrix(pred, labels, cfg.n_cls, IGNORE_LABEL))


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield order[i : i + size]


def _dump_batch(dump_dir, step: int, rgb, depth, labels) -> Path:
    target = Path(dump_dir) if dump_dir else Path(tempfile.gettempdir())
    target.mkdir(parents=True, exist_ok=True)
    path = target / f"diverged_step{step}.npz"
    np.savez(path, rgb=rgb, depth=depth, labels=labels, step=step)
    return path


def run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: list[SegSample],
    eval_set: list[SegSample] | None = None,
    checkpoint_path=None,
    history_path=None,
    dump_dir=None,
    params: Params | None = None,
) -> TrainResult:
    """Train from ``init_params(model_cfg, train_cfg.seed)`` (or ``params``).

    Steps are numbered 1..total_steps and step ``t`` uses
    ``lr_schedule(t)``. The model is evaluated every ``eval_every`` steps and
    at the last step; the best checkpoint is written to ``checkpoint_path``.
    """
    if not dataset:
        raise DataError("training set is empty")
    if any(s.labels is None for s in dataset):
        raise DataError("training samples need labels")
    eval_set = dataset if eval_set is None else eval_set
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    state = AdamWState()
    batches = _batches(len(dataset), min(train_cfg.batch_size, len(dataset)), rng)
    losses, lrs, history = [], [], []
    best = -1.0
    with precision(model_cfg.precision):
        for step in range(1, train_cfg.total_steps + 1):
            picked = [random_hflip(dataset[i], train_cfg.flip_p, rng) for i in next(batches)]
            rgb, depth, labels = stack(picked)
            for p in params.values():
                p.zero_grad()
            logits = forward(Tensor(rgb), Tensor(depth) if model_cfg.uses_depth else None, model_cfg, params)
            loss = cross_entropy_loss(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                dump = _dump_batch(dump_dir, step, rgb, depth, labels)
                raise TrainingDivergedError(f"loss became {value} at step {step}", dump)
            loss.backward()
            lr = lr_schedule(step, train_cfg)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            adamw_step(params, grads, state, lr, train_cfg.weight_decay)
            losses.append(value)
            lrs.append(lr)
            if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
                miou = evaluate(params, model_cfg, eval_set)[0]
                history.append((step, value, miou))
                if miou > best:
                    best = miou
                    if checkpoint_path is not None:
                        save_checkpoint(params, model_cfg, checkpoint_path)
    result = TrainResult(params, losses, lrs, history, best)
    if history_path is not None:
        atomic_write_text(history_path, result.history_csv())
    return result


# -- ablations -------------------------------------------------------------------

@dataclass
class AblationRow:
    arm: str
    miou: float
    macc: float
    focus_iou: float
    params: int
    per_seed_miou: list[float] = field(default_factory=list)
    per_seed_focus: list[float] = field(default_factory=list)


@dataclass
class AblationTable:
    rows: list[AblationRow]
    focus_classes: tuple[int, ...]

    def row(self, arm: str) -> AblationRow:
        for r in self.rows:
            if r.arm == arm:
                return r
        raise KeyError(arm)

    def to_text(self) -> str:
        focus = "/".join(str(c) for c in self.focus_classes) or "-"
        lines = [f"{'arm':<22}{'params':>10}{'mIoU':>9}{'mAcc':>9}{'IoU[' + focus + ']':>14}"]
        for r in self.rows:
            lines.append(f"{r.arm:<22}{r.params:>10d}{r.miou:>9.2f}{r.macc:>9.2f}{r.focus_iou:>14.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["arm,params,miou,macc,focus_iou"]
        lines += [f"{r.arm},{r.params},{r.miou:.6f},{r.macc:.6f},{r.focus_iou:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"


def run_ablation(
    arms: list[str],
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: list[SegSample],
    test_set: list[SegSample] | None = None,
    focus_classes: tuple[int, ...] = (),
    seeds: tuple[int, ...] | None = None,
) -> AblationTable:
    """Train every arm on the same data and schedule; report medians over seeds.

    Arms are names accepted by :func:`arm_config`. Rows keep the input order.
    """
    if len(arms) < 2:
        raise ConfigError("an ablation needs at least two arms")
    seeds = (train_cfg.seed,) if seeds is None else tuple(seeds)
    test_set = train_set if test_set is None else test_set
    rows = []
    for arm in arms:
        cfg = arm_config(base_cfg, arm)
        mious, maccs, focus = [], [], []
        n_params = 0
        for seed in seeds:
            result = run_training(cfg.replace(seed=seed), train_cfg.replace(seed=seed), train_set, eval_set=test_set)
            miou, macc, iou = evaluate(result.params, cfg, test_set)
            mious.append(miou)
            maccs.append(macc)
            focus.append(float(np.nanmean(iou[list(focus_classes)])) if focus_classes else float("nan"))
            n_params = parameter_count(result.params)
        rows.append(AblationRow(arm, median(mious), median(maccs), median(focus), n_params, mious, focus))
    return AblationTable(rows, tuple(focus_classes))
