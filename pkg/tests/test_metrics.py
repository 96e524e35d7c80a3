import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dipformer.errors import DataError, UndefinedRecallError
from dipformer.metrics import (
    binary_metrics_at,
    binary_report,
    confusion_matrix,
    f_measure,
    max_f_and_ap,
    metrics_from_precision_recall,
    multiclass_miou_macc,
    multiclass_report,
)


def test_published_precision_recall_pair():
    f1, fnr = metrics_from_precision_recall(97.34, 97.79)
    assert f1 == pytest.approx(97.57, abs=0.01)
    assert fnr == pytest.approx(2.21, abs=1e-9)


def test_perfect_prediction():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:5] = 1
    m = binary_metrics_at(gt.astype(float), gt, 0.5)
    assert (m.pre, m.rec, m.f1, m.iou, m.fpr, m.fnr) == (100, 100, 100, 100, 0, 0)
    max_f, ap, _ = max_f_and_ap(gt.astype(float), gt)
    assert max_f == 100 and ap == 100


def test_constant_scores_closed_form():
    gt = np.zeros((4, 4), np.uint8)
    gt[:2] = 1
    prob = np.full((4, 4), 0.5)
    _, _, curve = max_f_and_ap(prob, gt, 11)
    for t, pre, rec in curve:
        if t <= 0.5:
            assert f_measure(pre, rec) == pytest.approx(66.6667, abs=1e-3)
        else:
            assert rec == 0


def test_empty_ground_truth_raises():
    with pytest.raises(UndefinedRecallError):
        binary_metrics_at(np.zeros((2, 2)), np.zeros((2, 2)), 0.5)


def test_invalid_inputs():
    with pytest.raises(DataError):
        binary_metrics_at(np.full((2, 2), 1.5), np.ones((2, 2)), 0.5)
    with pytest.raises(DataError):
        binary_metrics_at(np.zeros((2, 2)), np.full((2, 2), 2), 0.5)
    with pytest.raises(DataError):
        max_f_and_ap(np.zeros((2, 2)), np.ones((2, 2)), 1)


def test_binary_metrics_match_counting_oracle(rng):
    for _ in range(20):
        prob = rng.random((32, 32))
        gt = (rng.random((32, 32)) < 0.3).astype(np.uint8)
        t = rng.random()
        got = binary_metrics_at(prob, gt, t)
        assert tuple(got) == pytest.approx(oracles.binary_metrics(prob, gt, t), abs=1e-12)


def test_threshold_sweep_matches_oracle(rng):
    prob = np.round(rng.random((6, 7)), 2)  # rounding creates ties at sweep thresholds
    gt = (rng.random((6, 7)) < 0.5).astype(np.uint8)
    gt[0, 0] = 1
    _, _, curve = max_f_and_ap(prob, gt, 21)
    assert curve == oracles.threshold_sweep(prob, gt, 21)


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_max_f_dominates_every_threshold(seed):
    r = np.random.default_rng(seed)
    prob = r.random((5, 5))
    gt = (r.random((5, 5)) < 0.5).astype(np.uint8)
    gt[0, 0] = 1
    max_f, ap, curve = max_f_and_ap(prob, gt, 17)
    assert all(max_f >= f_measure(p, rc) for _, p, rc in curve)
    assert 0 <= ap <= 100


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_flipping_more_pixels_never_raises_iou(seed):
    r = np.random.default_rng(seed)
    gt = (r.random((6, 6)) < 0.5).astype(np.uint8)
    gt[0, 0] = 1
    pred = gt.astype(float)
    last = 100.0
    for idx in r.permutation(36)[:12]:
        pred.flat[idx] = 1.0 - gt.flat[idx]  # move further from gt
        iou = binary_metrics_at(pred, gt, 0.5).iou
        assert iou <= last
        last = iou


def test_rates_are_consistent(rng):
    prob, gt = rng.random((9, 9)), (rng.random((9, 9)) < 0.4).astype(np.uint8)
    m = binary_metrics_at(prob, gt, 0.4)
    tp, fp, tn, fn = oracles.binary_counts(prob >= 0.4, gt)
    assert tp + fp + tn + fn == gt.size
    assert abs(m.fnr - (100 - m.rec)) <= 1e-9
    assert m.fpr == pytest.approx(100 * fp / (fp + tn))


def test_multiclass_perfect_and_hand_counted():
    gt = np.array([[0, 1, 2], [2, 1, 0]])
    assert multiclass_miou_macc(gt, gt, 3)[:2] == (100.0, 100.0)
    gt = np.array([[0, 0], [1, 1]])
    miou, macc, iou = multiclass_miou_macc(np.zeros_like(gt), gt, 2)
    assert (iou[0], iou[1], miou) == (50.0, 0.0, 25.0)
    assert macc == 50.0


def test_multiclass_matches_oracle_with_ignore(rng):
    gt = rng.integers(0, 5, (64, 64))
    gt[rng.random((64, 64)) < 0.1] = 255
    pred = rng.integers(0, 5, (64, 64))
    pred[rng.random((64, 64)) < 0.05] = 255
    miou, macc, _ = multiclass_miou_macc(pred, gt, 5)
    want = oracles.miou_macc(pred, gt, 5)
    assert (miou, macc) == pytest.approx(want, abs=1e-12)


def test_confusion_rows_are_class_counts(rng):
    gt = rng.integers(0, 4, (10, 10))
    cm = confusion_matrix(rng.integers(0, 4, (10, 10)), gt, 4)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(gt.ravel(), minlength=4))


def test_absent_classes_excluded():
    gt = np.array([[0, 0], [1, 1]])
    miou, _, iou = multiclass_miou_macc(gt, gt, 4)
    assert miou == 100.0 and np.isnan(iou[2]) and np.isnan(iou[3])


def test_out_of_range_labels():
    with pytest.raises(DataError):
        multiclass_miou_macc(np.array([[5]]), np.array([[0]]), 3)


def test_reports_serialize(rng):
    gt = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    report = binary_report(rng.random((8, 8)), gt)
    kv = dict(line.split("=") for line in report.to_kv().splitlines())
    assert set(kv) == {"max_f", "ap", "pre", "rec", "fpr", "fnr", "iou"}
    assert all(0 <= float(v) <= 100 for v in kv.values())
    rec = json.loads(multiclass_report(np.zeros((2, 2), int), np.array([[0, 1], [0, 1]]), 3).to_json())
    assert rec["miou"] == 25.0 and rec["per_class_iou"][2] is None
