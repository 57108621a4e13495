"""Pixel-level detection metrics (IoU, nIoU, Pd, Fa) and ROC curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_THRESHOLD = 0.5


def _arr(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def pixel_confusion(pred, gt, threshold: float = DEFAULT_THRESHOLD) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with ``pred >= threshold`` counted positive."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"pixel_confusion: prediction {p.shape} vs ground truth {g.shape}")
    pos = p >= threshold
    tgt = g > 0.5
    tp = int(np.count_nonzero(pos & tgt))
    fp = int(np.count_nonzero(pos & ~tgt))
    fn = int(np.count_nonzero(~pos & tgt))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, tn, fn


@dataclass
class MetricsAccumulator:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    samples: list = field(default_factory=list)  # (TP_i, T_i, P_i)
    threshold: float = DEFAULT_THRESHOLD

    def update(self, pred, gt) -> None:
        """Add a batch; every leading index of an (n, ...) array is one sample."""
        p, g = _arr(pred), _arr(gt)
        if p.shape != g.shape:
            raise ValueError(f"metrics update: prediction {p.shape} vs ground truth {g.shape}")
        if p.ndim < 3:
            p, g = p[None], g[None]
        for pi, gi in zip(p, g):
            tp, fp, tn, fn = pixel_confusion(pi, gi, self.threshold)
            self.tp += tp
            self.fp += fp
            self.tn += tn
            self.fn += fn
            self.samples.append((tp, tp + fn, tp + fp))

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        if other.threshold != self.threshold:
            raise ValueError("cannot merge accumulators with different thresholds")
        return MetricsAccumulator(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                                  self.fn + other.fn, self.samples + other.samples, self.threshold)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def total_pixels(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def iou(acc: MetricsAccumulator) -> float:
    t, p = acc.tp + acc.fn, acc.tp + acc.fp
    den = t + p - acc.tp
    return acc.tp / den if den else 0.0


def niou(acc: MetricsAccumulator) -> float:
    """Mean per-sample IoU; a sample with empty target and empty prediction scores 1."""
    if not acc.samples:
        return 0.0
    vals = [tp / (t + p - tp) if (t + p - tp) else 1.0 for tp, t, p in acc.samples]
    return float(np.mean(vals))


def pd(acc: MetricsAccumulator) -> float:
    den = acc.tp + acc.fn
    return acc.tp / den if den else 0.0


def fa(acc: MetricsAccumulator) -> float:
    den = acc.fp + acc.tn
    return acc.fp / den if den else 0.0


@dataclass
class MetricsReport:
    iou: float
    niou: float
    pd: float
    fa: float
    n_samples: int
    flags: list = field(default_factory=list)

    @property
    def fa_e6(self) -> float:
        return self.fa * 1e6

    def row(self) -> dict:
        return {"iou": f"{self.iou:.6f}", "niou": f"{self.niou:.6f}", "pd": f"{self.pd:.6f}",
                "fa_e6": f"{self.fa_e6:.4f}", "n_samples": self.n_samples}


REPORT_COLUMNS = ("iou", "niou", "pd", "fa_e6", "n_samples")


def report(acc: MetricsAccumulator) -> MetricsReport:
    flags = []
    if acc.tp + acc.fn + acc.fp == 0:
        flags.append("empty_target_and_prediction")
    if acc.tp + acc.fn == 0:
        flags.append("no_target_pixels")
    if acc.fp + acc.tn == 0:
        flags.append("no_background_pixels")
    empty = sum(1 for tp, t, p in acc.samples if t + p - tp == 0)
    if empty:
        flags.append(f"degenerate_samples={empty}")
    return MetricsReport(iou(acc), niou(acc), pd(acc), fa(acc), acc.n_samples, flags)


def write_report_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


@dataclass
class RocCurve:
    points: list  # (threshold, tpr, fpr), thresholds strictly decreasing

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "tpr", "fpr"])
            for t, tpr, fpr in self.points:
                w.writerow([f"{t:.6f}", f"{tpr:.8f}", f"{fpr:.8f}"])


def default_thresholds(n: int = 101) -> np.ndarray:
    return np.linspace(1.0, 0.0, n)


def roc_curve(preds: Iterable, gts: Iterable, thresholds: Optional[Sequence[float]] = None) -> RocCurve:
    """Pixel-level TPR/FPR pooled over all maps at each threshold."""
    th = np.asarray(default_thresholds() if thresholds is None else thresholds, dtype=np.float64)
    if th.size == 0:
        raise ValueError("roc_curve needs a non-empty threshold grid")
    if np.any(np.diff(th) >= 0):
        raise ValueError("roc thresholds must be strictly decreasing")
    scores = np.concatenate([_arr(p).ravel() for p in preds])
    labels = np.concatenate([_arr(g).ravel() for g in gts]) > 0.5
    if scores.shape != labels.shape:
        raise ValueError("roc_curve: predictions and ground truths differ in size")
    pos_scores = np.sort(scores[labels])
    neg_scores = np.sort(scores[~labels])
    n_pos, n_neg = pos_scores.size, neg_scores.size
    points = []
    for t in th:
        # count of scores >= t
        tp = n_pos - np.searchsorted(pos_scores, t, side="left")
        fp = n_neg - np.searchsorted(neg_scores, t, side="left")
        points.append((float(t), tp / n_pos if n_pos else 0.0, fp / n_neg if n_neg else 0.0))
    return RocCurve(points)
