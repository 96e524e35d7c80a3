"""Road-detection and multi-class segmentation metrics.

All reported values are percentages. Binary metrics treat a pixel as a
predicted positive when its probability is >= the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError, UndefinedRecallError

DEFAULT_THRESHOLDS = 256


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class BinaryMetrics(NamedTuple):
    pre: float
    rec: float
    fpr: float
    fnr: float
    f1: float
    iou: float


def f_measure(pre: float, rec: float) -> float:
    """Harmonic mean of precision and recall (same units as the inputs)."""
    return 0.0 if pre + rec == 0 else 2.0 * pre * rec / (pre + rec)


def _check_binary(prob: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if prob.shape != gt.shape:
        raise DataError(f"probability map {prob.shape} and mask {gt.shape} differ in shape")
    if prob.size and (np.nanmin(prob) < 0 or np.nanmax(prob) > 1 or np.isnan(prob).any()):
        raise DataError("probabilities must lie in [0, 1]")
    if not np.isin(gt, (0, 1)).all():
        raise DataError("ground-truth mask must be binary")
    gt = gt.astype(bool)
    if not gt.any():
        raise UndefinedRecallError("ground truth has no positive pixels; recall is undefined")
    return gt


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, int(gt.size) - tp - fp - fn, fn)


def metrics_from_counts(c: ConfusionCounts) -> BinaryMetrics:
    """Percentages from counts. Precision is 0 with no predicted positives,
    FPR is 0 when there are no negatives."""
    if c.tp + c.fn == 0:
        raise UndefinedRecallError("no positive ground-truth pixels")
    pre = 100.0 * c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    rec = 100.0 * c.tp / (c.tp + c.fn)
    fpr = 100.0 * c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    fnr = 100.0 * c.fn / (c.tp + c.fn)
    iou = 100.0 * c.tp / (c.tp + c.fp + c.fn)
    return BinaryMetrics(pre, rec, fpr, fnr, f_measure(pre, rec), iou)


def binary_metrics_at(prob, gt, threshold: float) -> BinaryMetrics:
    prob, gt = _array(prob), _array(gt)
    gt = _check_binary(prob, gt)
    return metrics_from_counts(confusion_counts(prob >= threshold, gt))


def metrics_from_precision_recall(pre: float, rec: float) -> tuple[float, float]:
    """(F1, FNR) implied by a published precision/recall pair, in percent."""
    return f_measure(pre, rec), 100.0 - rec


def threshold_curve(prob, gt, n_thresholds: int = DEFAULT_THRESHOLDS) -> list[tuple[float, ConfusionCounts]]:
    """Confusion counts at ``n_thresholds`` uniform thresholds over [0, 1]."""
    if n_thresholds < 2:
        raise DataError("need at least two thresholds")
    prob, gt = _array(prob), _array(gt)
    gt = _check_binary(prob, gt)
    pos = np.sort(prob[gt].ravel())
    neg = np.sort(prob[~gt].ravel())
    ts = np.linspace(0.0, 1.0, n_thresholds)
    # count of scores >= t equals len - (number of scores < t)
    tp = pos.size - np.searchsorted(pos, ts, side="left")
    fp = neg.size - np.searchsorted(neg, ts, side="left")
    return [
        (float(t), ConfusionCounts(int(a), int(b), int(neg.size - b), int(pos.size - a)))
        for t, a, b in zip(ts, tp, fp)
    ]


def interpolated_ap(curve: list[tuple[float, float, float]], points: int = 11) -> float:
    """11-point interpolated AP: mean over recall levels r of the best
    precision reached at recall >= r."""
    pre = np.array([p for _, p, _ in curve])
    rec = np.array([r for _, _, r in curve])
    total = 0.0
    for level in np.linspace(0.0, 100.0, points):
        reach = pre[rec >= level - 1e-9]
        total += reach.max() if reach.size else 0.0
    return total / points


def max_f_and_ap(prob, gt, n_thresholds: int = DEFAULT_THRESHOLDS):
    """Return (MaxF, AP, curve) where curve lists (threshold, precision, recall)."""
    curve = []
    best = 0.0
    for t, counts in threshold_curve(prob, gt, n_thresholds):
        m = metrics_from_counts(counts)
        curve.append((t, m.pre, m.rec))
        best = max(best, m.f1)
    return best, interpolated_ap(curve), curve


def confusion_matrix(pred, gt, n_cls: int, ignore_label: int = 255) -> np.ndarray:
    """Rows are ground-truth classes, columns predictions; the extra last
    column counts pixels predicted as ``ignore_label``."""
    pred, gt = _array(pred).astype(np.int64).ravel(), _array(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise DataError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        bad = (arr != ignore_label) & ((arr < 0) | (arr >= n_cls))
        if bad.any():
            raise DataError(f"{name} label {arr[bad][0]} outside [0, {n_cls}) and not {ignore_label}")
    keep = gt != ignore_label
    pred, gt = pred[keep], gt[keep]
    pred = np.where(pred == ignore_label, n_cls, pred)
    return np.bincount(gt * (n_cls + 1) + pred, minlength=n_cls * (n_cls + 1)).reshape(n_cls, n_cls + 1)


def multiclass_miou_macc(pred, gt, n_cls: int, ignore_label: int = 255):
    """Return (mIoU, mAcc, per-class IoU). Classes absent from the ground
    truth get NaN and are left out of both means."""
    cm = confusion_matrix(pred, gt, n_cls, ignore_label)
    return scores_from_confusion(cm)


def scores_from_confusion(cm: np.ndarray):
    n_cls = cm.shape[0]
    gt_count = cm.sum(axis=1)
    if gt_count.sum() == 0:
        raise DataError("no labelled pixels to evaluate")
    tp = np.diag(cm[:, :n_cls]).astype(float)
    fp = cm[:, :n_cls].sum(axis=0) - tp
    fn = gt_count - tp
    present = gt_count > 0
    iou = np.full(n_cls, np.nan)
    iou[present] = 100.0 * tp[present] / (tp + fp + fn)[present]
    acc = 100.0 * tp[present] / gt_count[present]
    return float(np.mean(iou[present])), float(np.mean(acc)), iou


@dataclass
class MetricsReport:
    max_f: float | None = None
    ap: float | None = None
    pre: float | None = None
    rec: float | None = None
    fpr: float | None = None
    fnr: float | None = None
    iou: float | None = None
    miou: float | None = None
    macc: float | None = None
    per_class_iou: list[float] = field(default_factory=list)
    threshold_curve: list[tuple[float, float, float]] = field(default_factory=list)

    def to_kv(self) -> str:
        lines = []
        for key in ("max_f", "ap", "pre", "rec", "fpr", "fnr", "iou", "miou", "macc"):
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key}={v:.4f}")
        for c, v in enumerate(self.per_class_iou):
            lines.append(f"iou_class{c}={'nan' if math.isnan(v) else f'{v:.4f}'}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rec = asdict(self)
        rec["per_class_iou"] = [None if math.isnan(v) else v for v in self.per_class_iou]
        return json.dumps(rec, indent=1, sort_keys=True) + "\n"


def binary_report(prob, gt, threshold: float = 0.5, n_thresholds: int = DEFAULT_THRESHOLDS) -> MetricsReport:
    m = binary_metrics_at(prob, gt, threshold)
    max_f, ap, curve = max_f_and_ap(prob, gt, n_thresholds)
    return MetricsReport(max_f=max_f, ap=ap, pre=m.pre, rec=m.rec, fpr=m.fpr, fnr=m.fnr, iou=m.iou, threshold_curve=curve)


def multiclass_report(pred, gt, n_cls: int, ignore_label: int = 255) -> MetricsReport:
    miou, macc, iou = multiclass_miou_macc(pred, gt, n_cls, ignore_label)
    return MetricsReport(miou=miou, macc=macc, per_class_iou=[float(v) for v in iou])
