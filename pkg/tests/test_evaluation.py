import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashpath.evaluation import (
    DEFAULT_THRESHOLDS,
    ConfusionCounts,
    RocCurve,
    aggregate,
    auc_trapezoid,
    confusion,
    degenerate_flags,
    evaluate_core,
    f1,
    pooled_roc,
    precision,
    roc_curve,
    sensitivity,
    specificity,
    write_metrics_csv,
    write_roc_csv,
)


def _curve(points):
    pts = np.array(points, dtype=float)
    return RocCurve(pts[:, 0], pts[:, 1], np.linspace(1, 0, len(pts)))


def test_confusion_examples():
    gt = np.zeros(200, dtype=bool)
    gt[:100] = True
    assert confusion(gt, gt) == ConfusionCounts(tp=100, fp=0, tn=100, fn=0)
    neg = np.zeros((4, 5), dtype=bool)
    assert confusion(~neg, neg) == ConfusionCounts(0, 20, 0, 0)
    c = confusion(~gt, gt)
    assert c.tp == 0 and c.tn == 0
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_metric_formulas():
    c = ConfusionCounts(tp=90, fp=0, tn=0, fn=10)
    assert sensitivity(c) == pytest.approx(0.9)
    assert f1(ConfusionCounts(10, 0, 5, 0)) == 1.0
    half = ConfusionCounts(tp=1, fp=1, tn=0, fn=1)
    assert sensitivity(half) == precision(half) == 0.5
    assert f1(half) == pytest.approx(0.5)
    assert specificity(ConfusionCounts(0, 1, 3, 0)) == pytest.approx(0.75)


def test_zero_denominators_are_flagged():
    c = ConfusionCounts(tp=0, fp=0, tn=5, fn=3)
    assert sensitivity(c) == 0 and precision(c) == 0 and f1(c) == 0
    assert "precision" in degenerate_flags(c)
    assert "sensitivity" not in degenerate_flags(c)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_between_sensitivity_and_precision(tp, fp, tn, fn):
    c = ConfusionCounts(tp, fp, tn, fn)
    s, p = sensitivity(c), precision(c)
    assert min(s, p) - 1e-12 <= f1(c) <= max(s, p) + 1e-12


def test_auc_reference_curves():
    assert auc_trapezoid(_curve([(0, 0), (0, 1), (1, 1)])) == 1.0
    assert auc_trapezoid(_curve([(0, 0), (1, 1)])) == 0.5
    assert auc_trapezoid(_curve([(0, 0), (0.5, 0.5), (1, 1)])) == 0.5


def test_roc_perfect_and_constant_scores():
    gt = np.array([1] * 50 + [0] * 50, dtype=bool)
    probs = np.where(gt, 0.9, 0.1)
    c = roc_curve(probs, gt)
    assert (0.0, 1.0) in c.points
    assert auc_trapezoid(c) == pytest.approx(1.0)
    assert len(c.points) == 103

    flat = roc_curve(np.full(100, 0.3), gt)
    assert set(flat.points) == {(0.0, 0.0), (1.0, 1.0)}
    assert auc_trapezoid(flat) == pytest.approx(0.5)

    with pytest.raises(ValueError):
        roc_curve(probs, np.ones(100, dtype=bool))


def test_roc_random_scores_hug_diagonal():
    rng = np.random.default_rng(0)
    probs = rng.random(10**5)
    gt = rng.random(10**5) < 0.5
    c = roc_curve(probs, gt)
    assert np.all(np.abs(c.fpr - c.tpr) < 0.02)


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_roc_curve_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 300))
    gt = rng.random(n) < 0.5
    gt[0], gt[1] = True, False
    probs = 0.7 * rng.random(n) + 0.3 * gt
    c = roc_curve(probs, gt)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert c.points[0] == (0.0, 0.0) and c.points[-1] == (1.0, 1.0)
    a = auc_trapezoid(c)
    assert 0 <= a <= 1
    # negated scores with complemented labels describe the same ranking problem
    thr = -DEFAULT_THRESHOLDS[::-1]
    flipped = auc_trapezoid(roc_curve(-probs, ~gt, thr))
    assert flipped == pytest.approx(a, abs=1e-12)


def test_roc_matches_brute_force_counts():
    rng = np.random.default_rng(3)
    probs = np.round(rng.random(500), 2)
    gt = rng.random(500) < 0.4
    c = roc_curve(probs, gt)
    for t, x, y in zip(c.thresholds[1:-1], c.fpr[1:-1], c.tpr[1:-1]):
        pred = probs >= t
        assert y == (pred & gt).sum() / gt.sum()
        assert x == (pred & ~gt).sum() / (~gt).sum()


def test_evaluate_core_identity_and_aggregation():
    gt = np.zeros((16, 16), dtype=bool)
    gt[4:10, 3:12] = True
    r = evaluate_core(gt, gt.astype(np.float32), gt)
    assert (r.sensitivity, r.precision, r.f1, r.specificity, r.auc) == (1, 1, 1, 1, 1)
    assert r.degenerate == []

    a = r
    b = type(r)("b", 0.9, 0.9, 0.9, 0.9, 0.9)
    agg = aggregate([a, b])
    mean, std = agg["sensitivity"]
    assert mean == pytest.approx(0.95)
    assert std == pytest.approx(math.sqrt(0.005), abs=1e-4)  # 0.0707...


def test_confusion_is_permutation_invariant():
    rng = np.random.default_rng(1)
    pred = rng.random(400) < 0.5
    gt = rng.random(400) < 0.5
    perm = rng.permutation(400)
    assert confusion(pred, gt) == confusion(pred[perm], gt[perm])


def test_csv_outputs(tmp_path):
    gt = np.zeros((8, 8), dtype=bool)
    gt[:4] = True
    recs = [evaluate_core(gt, gt.astype(float), gt, "c0"), evaluate_core(~gt, gt.astype(float), gt, "c1")]
    write_metrics_csv(recs, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "core_id,sensitivity,precision,f1,specificity,auc,degenerate_flags"
    assert lines[1].startswith("c0,1.000000,1.000000,1.000000,1.000000,1.000000")
    assert [l.split(",")[0] for l in lines[3:]] == ["mean", "std"]

    write_roc_csv(pooled_roc([gt.astype(float)], [gt]), tmp_path / "roc.csv")
    rows = (tmp_path / "roc.csv").read_text().splitlines()
    assert rows[0] == "threshold,fpr,tpr" and len(rows) == 104
