"""Segmentation metrics, object-level recall, timing, and statistical tests.

Curve areas are computed from a sweep over all distinct predicted values:
ROC by trapezoid, the precision-recall area by step integration under the
precision envelope (average-precision style).  Both are invariant to any
strictly monotone transform of the probabilities.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import ContractViolation

PER_IMAGE_COLUMNS = ["id", "iou", "dice", "precision", "sensitivity",
                     "pixel_accuracy", "runtime_seconds"]


def binarize(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 iff p > threshold (strict)."""
    return (np.asarray(probabilities) > threshold).astype(np.uint8)


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ContractViolation(f"{name} must be strictly binary")
    return m.astype(bool)


def pixel_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> dict:
    pred = _check_binary(pred_mask, "pred_mask")
    gt = _check_binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ContractViolation("mask shapes differ")
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    tn = int((~pred & ~gt).sum())
    both_empty = (tp + fp + fn) == 0

    def ratio(num, den):
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    return {
        "iou": ratio(tp, tp + fp + fn),
        "dice": ratio(2 * tp, 2 * tp + fp + fn),
        "precision": ratio(tp, tp + fp),
        "sensitivity": ratio(tp, tp + fn),
        "pixel_accuracy": (tp + tn) / pred.size,
    }


def curve_metrics(probabilities: np.ndarray, gt_mask: np.ndarray) -> dict:
    """ROC and PR areas over all distinct thresholds.

    With a single-class ground truth the undefined area(s) come back as NaN
    rather than a silent zero.
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    gt = _check_binary(gt_mask, "gt_mask").ravel()
    if p.shape != gt.shape:
        raise ContractViolation("shapes differ")
    npos = int(gt.sum())
    nneg = gt.size - npos
    if npos == 0:
        return {"roc_auc": math.nan, "pr_auc": math.nan}

    order = np.argsort(-p, kind="stable")
    ps = p[order]
    gs = gt[order].astype(np.int64)
    tp_cum = np.cumsum(gs)
    fp_cum = np.cumsum(1 - gs)
    # last index of each run of equal probabilities = inclusive threshold p >= v
    distinct = np.nonzero(np.diff(ps, append=-np.inf))[0]
    tp = tp_cum[distinct].astype(np.float64)
    fp = fp_cum[distinct].astype(np.float64)

    if nneg == 0:
        roc_auc = math.nan
    else:
        tpr = np.concatenate([[0.0], tp / npos])
        fpr = np.concatenate([[0.0], fp / nneg])
        roc_auc = float(np.trapezoid(tpr, fpr))

    recall = tp / npos
    precision = tp / (tp + fp)
    # precision envelope: best precision achievable at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    pr_auc = float(np.sum((recall - r_prev) * env))
    return {"roc_auc": roc_auc, "pr_auc": pr_auc}


def object_recall(pred_mask: np.ndarray, gt_mask: np.ndarray,
                  overlap_threshold: float = 0.5) -> float:
    """Fraction of 8-connected ground-truth components whose overlap with the
    prediction strictly exceeds the threshold.  1.0 when there is nothing to
    detect."""
    pred = _check_binary(pred_mask, "pred_mask")
    gt = _check_binary(gt_mask, "gt_mask")
    labels, count = ndimage.label(gt, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return 1.0
    detected = 0
    for lab in range(1, count + 1):
        comp = labels == lab
        if (comp & pred).sum() / comp.sum() > overlap_threshold:
            detected += 1
    return detected / count


@dataclass
class TTestResult:
    statistic: float
    significant: bool
    direction: int


def one_sided_t_test(sample_a, sample_b, alpha: float = 0.05) -> TTestResult:
    """Paired one-sided t-test on a - b.

    direction +1 when a is significantly larger, -1 when significantly
    smaller, 0 otherwise.  Zero-variance nonzero differences count as an
    infinite statistic (degenerate certainty).
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation("samples must be equal-length 1-D sequences")
    n = a.size
    if n < 2:
        raise ContractViolation("need at least 2 paired samples")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, False, 0)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t, True, 1 if mean > 0 else -1)
    t = mean / (sd / math.sqrt(n))
    p_greater = float(stats.t.sf(t, n - 1))
    p_less = float(stats.t.cdf(t, n - 1))
    if mean > 0 and p_greater < alpha:
        return TTestResult(t, True, 1)
    if mean < 0 and p_less < alpha:
        return TTestResult(t, True, -1)
    return TTestResult(t, False, 0)


def time_inference(predict, inputs, warmup: int = 3) -> float:
    """Mean wall-clock seconds per item, excluding warmup runs."""
    for item in inputs[:warmup]:
        predict(item)
    t0 = time.perf_counter()
    for item in inputs:
        predict(item)
    return (time.perf_counter() - t0) / len(inputs)


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=PER_IMAGE_COLUMNS)
            writer.writeheader()
            for rec in self.per_image:
                writer.writerow({k: rec[k] for k in PER_IMAGE_COLUMNS})

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.aggregate, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def read_csv(path) -> "MetricReport":
        report = MetricReport()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {"id": row["id"]}
                for k in PER_IMAGE_COLUMNS[1:]:
                    rec[k] = float(row[k])
                report.per_image.append(rec)
        return report


def aggregate_report(per_image: list, pooled_probs: np.ndarray,
                     pooled_gt: np.ndarray, object_stats: tuple[int, int],
                     seconds_per_image: float) -> MetricReport:
    """Assemble the full report from per-image records and pooled pixels.

    The published table columns map as: Se=sensitivity, Pr=precision,
    AUC=area under the precision-recall curve, AP=pixel accuracy.
    """
    ious = np.array([r["iou"] for r in per_image], dtype=np.float64)
    curves = curve_metrics(pooled_probs, pooled_gt)
    detected, total = object_stats
    agg = {
        "IoU": float(ious.mean()),
        "Dice": float(np.mean([r["dice"] for r in per_image])),
        "Se": float(np.mean([r["sensitivity"] for r in per_image])),
        "Pr": float(np.mean([r["precision"] for r in per_image])),
        "AP": float(np.mean([r["pixel_accuracy"] for r in per_image])),
        "AUC": curves["pr_auc"],
        "pixel_accuracy": float(np.mean([r["pixel_accuracy"] for r in per_image])),
        "pr_auc": curves["pr_auc"],
        "roc_auc": curves["roc_auc"],
        "object_recall": (detected / total) if total else 1.0,
        "iou_variance": float(ious.var(ddof=0)),
        "iou_stddev": float(ious.std(ddof=0)),
        "seconds_per_image": seconds_per_image,
    }
    return MetricReport(per_image=per_image, aggregate=agg)
