"""AUC-ROC, thresholded classification metrics and Spearman correlation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype != bool:
        if not np.all((y == 0) | (y == 1)):
            raise MetricError("labels must be boolean or 0/1")
        y = y.astype(bool)
    return y


def roc_curve(scores, labels) -> tuple[list[tuple[float, float]], int, int, int]:
    """ROC points from a sweep over distinct scores, highest first.

    Returns ``(points, twice_area_numerator, n_pos, n_neg)``: the trapezoid area is
    accumulated in integer counts so that ``auc = twice_area / (2 * n_pos * n_neg)``
    is exact.
    """
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    if s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(cut, s.size - 1)
    tp = np.cumsum(y)[ends].astype(np.int64)
    fp = (ends + 1) - tp
    tp = np.concatenate([[0], tp])
    fp = np.concatenate([[0], fp])
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    points = [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fp, tp)]
    return points, twice_area, n_pos, n_neg


def auc_roc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counting one half."""
    _, twice_area, n_pos, n_neg = roc_curve(scores, labels)
    return twice_area / (2 * n_pos * n_neg)


@dataclass(frozen=True)
class ThresholdMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision_defined: bool
    recall_defined: bool
    f1_defined: bool


def threshold_metrics(scores, labels, threshold: float = 0.5) -> ThresholdMetrics:
    """Point metrics with ``score >= threshold`` predicted positive.

    Undefined ratios (zero denominators) are reported as 0 with the matching
    ``*_defined`` flag cleared.
    """
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    if s.size == 0:
        raise MetricError("no predictions to score")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    p_ok, r_ok = tp + fp > 0, tp + fn > 0
    precision = tp / (tp + fp) if p_ok else 0.0
    recall = tp / (tp + fn) if r_ok else 0.0
    f_ok = p_ok and r_ok and precision + recall > 0
    f1 = 2 * precision * recall / (precision + recall) if f_ok else 0.0
    return ThresholdMetrics((tp + tn) / s.size, precision, recall, f1, tp, fp, tn, fn, p_ok, r_ok, f_ok)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("spearman needs two 1-D sequences of equal length")
    if x.size < 2:
        raise MetricError("spearman needs at least two observations")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    sx, sy = np.dot(rx, rx), np.dot(ry, ry)
    if sx == 0 or sy == 0:
        raise MetricError("spearman is undefined when an input has zero rank variance")
    return float(np.dot(rx, ry) / np.sqrt(sx * sy))


@dataclass
class MetricsReport:
    auc_roc: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    roc_points: list
    spearman_rho: float | None
    n_evaluated: int
    threshold: float = 0.5
    precision_defined: bool = True
    recall_defined: bool = True

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            w.writerows([f"{f:.12g}", f"{t:.12g}"] for f, t in self.roc_points)


def evaluate(scores, labels, severity_pred=None, severity_true=None, threshold: float = 0.5) -> MetricsReport:
    points, twice_area, n_pos, n_neg = roc_curve(scores, labels)
    tm = threshold_metrics(scores, labels, threshold)
    rho = None
    if severity_pred is not None and severity_true is not None:
        try:
            rho = spearman(severity_pred, severity_true)
        except MetricError:
            rho = None
    return MetricsReport(
        auc_roc=twice_area / (2 * n_pos * n_neg),
        accuracy=tm.accuracy, precision=tm.precision, recall=tm.recall, f1=tm.f1,
        tp=tm.tp, fp=tm.fp, tn=tm.tn, fn=tm.fn,
        roc_points=points, spearman_rho=rho, n_evaluated=int(np.size(scores)),
        threshold=threshold, precision_defined=tm.precision_defined, recall_defined=tm.recall_defined,
    )
