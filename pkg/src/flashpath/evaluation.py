"""Pixel-level detection metrics and ROC analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_THRESHOLDS = np.linspace(1.0, 0.0, 101)

# published reference values, for reports only
REFERENCE_TABLE = {
    "flash": {"sensitivity": 0.956, "precision": 0.775, "f1": 0.837, "auc": 0.934},
    "dense": {"sensitivity": 0.955, "precision": 0.774, "f1": 0.836, "auc": 0.932},
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # +inf for the prepended (0, 0), -inf for the appended (1, 1)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class CoreMetrics:
    core_id: str
    sensitivity: float
    precision: float
    f1: float
    specificity: float
    auc: float
    degenerate: list[str] = field(default_factory=list)


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    """Pixel tallies with tumor as the positive class."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction is {pred.shape} but ground truth is {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)[0]


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)[0]


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)[0]


def f1(c: ConfusionCounts) -> float:
    s, p = sensitivity(c), precision(c)
    return 2 * s * p / (s + p) if s + p else 0.0


def degenerate_flags(c: ConfusionCounts) -> list[str]:
    """Names of metrics whose denominator was zero (those metrics report 0)."""
    flags = []
    if c.tp + c.fn == 0:
        flags.append("sensitivity")
    if c.tp + c.fp == 0:
        flags.append("precision")
    if c.tn + c.fp == 0:
        flags.append("specificity")
    if sensitivity(c) + precision(c) == 0:
        flags.append("f1")
    return flags


def roc_curve(prob_map: np.ndarray, gt_mask: np.ndarray,
              thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> RocCurve:
    """(FPR, TPR) at each threshold, calling tumor where ``prob >= threshold``.

    (0, 0) is prepended and (1, 1) appended.
    """
    scores = np.asarray(prob_map, dtype=np.float64).ravel()
    gt = np.asarray(gt_mask, dtype=bool).ravel()
    if scores.shape != gt.shape:
        raise ValueError(f"probability map has {scores.size} pixels, ground truth {gt.size}")
    thr = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thr) > 0):
        raise ValueError("thresholds must be in descending order")
    pos = np.sort(scores[gt])
    neg = np.sort(scores[~gt])
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("ground truth must contain both tumor and non-tumor pixels")
    tp = len(pos) - np.searchsorted(pos, thr, side="left")
    fp = len(neg) - np.searchsorted(neg, thr, side="left")
    fpr = np.concatenate([[0.0], fp / len(neg), [1.0]])
    tpr = np.concatenate([[0.0], tp / len(pos), [1.0]])
    return RocCurve(fpr, tpr, np.concatenate([[np.inf], thr, [-np.inf]]))


def auc_trapezoid(curve: RocCurve) -> float:
    """Trapezoidal area under the curve's points in order."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def evaluate_core(pred_mask, prob_map, gt_mask, core_id: str = "core",
                  thresholds=DEFAULT_THRESHOLDS) -> CoreMetrics:
    c = confusion(pred_mask, gt_mask)
    flags = degenerate_flags(c)
    gt = np.asarray(gt_mask, dtype=bool)
    if gt.all() or not gt.any():
        auc = 0.0
        flags.append("auc")
    else:
        auc = auc_trapezoid(roc_curve(prob_map, gt, thresholds))
    return CoreMetrics(core_id, sensitivity(c), precision(c), f1(c), specificity(c), auc, flags)


METRIC_NAMES = ("sensitivity", "precision", "f1", "specificity", "auc")


def aggregate(records: Sequence[CoreMetrics]) -> dict[str, tuple[float, float]]:
    """Per-metric mean and sample (n-1) standard deviation across cores."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
        out[name] = (float(vals.mean()), std)
    return out


def pooled_roc(prob_maps, gt_masks, thresholds=DEFAULT_THRESHOLDS) -> RocCurve:
    """One curve over the pixels of all cores together."""
    probs = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in prob_maps])
    gts = np.concatenate([np.asarray(g, dtype=bool).ravel() for g in gt_masks])
    return roc_curve(probs, gts, thresholds)


def write_metrics_csv(records: Sequence[CoreMetrics], path, with_summary: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["core_id", *METRIC_NAMES, "degenerate_flags"])
        for r in records:
            w.writerow([r.core_id, *(f"{getattr(r, k):.6f}" for k in METRIC_NAMES),
                        ";".join(r.degenerate)])
        if with_summary and len(records) > 1:
            agg = aggregate(records)
            w.writerow(["mean", *(f"{agg[k][0]:.6f}" for k in METRIC_NAMES), ""])
            w.writerow(["std", *(f"{agg[k][1]:.6f}" for k in METRIC_NAMES), ""])


def write_roc_csv(curve: RocCurve, path, core_id: str | None = None, append: bool = False) -> None:
    """ROC rows ``threshold, fpr, tpr`` (prefixed by ``core_id`` when given)."""
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow((["core_id"] if core_id is not None else []) + ["threshold", "fpr", "tpr"])
        for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            row = [f"{t:.6f}" if np.isfinite(t) else ("inf" if t > 0 else "-inf"),
                   f"{x:.6f}", f"{y:.6f}"]
            w.writerow(([core_id] if core_id is not None else []) + row)
