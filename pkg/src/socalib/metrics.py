"""Calibration metrics and Pareto-based model selection.

Conventions, used consistently by every metric here:

* A prediction log holds post-softmax probabilities. Models with a reserved
  unknown class carry it in the last column; accuracy, confidence and
  class-wise calibration look at the real classes only, while the unknown
  column is summarized separately (``unknown_top1_freq``).
* Equal-width bins are the half-open intervals ((m-1)/M, m/M]. A confidence
  of exactly 0 joins the first bin; values exactly on an edge go to the
  lower bin.
* Metrics return fractions in [0, 1]; reports multiply by 100.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EmptyLogError(ValueError):
    """A metric needs at least one sample (or one Pareto point)."""


class TooFewSamplesError(ValueError):
    """Equal-mass binning needs at least M samples."""


class PredictionLog:
    """Immutable bundle of probabilities and ground truth for one split.

    probs           (n, K) rows summing to 1.
    labels          (n,) ints in [0, n_real_classes).
    n_real_classes  c; K must be c (plain model) or c+1 (last column is the
                    unknown class).

    Derived on construction: ``confidences`` (max over real columns),
    ``predicted`` (argmax over real columns), ``correct``.
    """

    def __init__(self, probs: np.ndarray, labels, n_real_classes: int):
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if probs.ndim != 2:
            raise ValueError("probs must be (n, K)")
        n, k = probs.shape
        c = int(n_real_classes)
        if c < 1 or k not in (c, c + 1):
            raise ValueError(
                f"got {k} probability columns for {c} real classes"
            )
        if labels.shape != (n,):
            raise ValueError("labels do not match probs")
        if n and (labels.min() < 0 or labels.max() >= c):
            raise ValueError("labels must index a real class")
        self.probs = probs
        self.labels = labels
        self.n_real_classes = c
        self.has_unknown = k == c + 1
        real = probs[:, :c]
        self.confidences = real.max(axis=1) if n else np.empty(0)
        self.predicted = (
            real.argmax(axis=1).astype(np.int64) if n else np.empty(0, np.int64)
        )
        self.correct = self.predicted == labels

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass
class BinStats:
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


def _bin_indices(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin index in [0, M) per sample under the half-open convention."""
    edges = np.arange(1, n_bins + 1) / n_bins
    idx = np.searchsorted(edges, confidences, side="left")
    return np.minimum(idx, n_bins - 1)


def bin_equal_width(log: PredictionLog, n_bins: int = 15) -> list[BinStats]:
    """Reliability-diagram bins over ((m-1)/M, m/M]; empty bins carry
    acc = conf = 0 and zero weight downstream."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if len(log) == 0:
        raise EmptyLogError("empty prediction log")
    idx = _bin_indices(log.confidences, n_bins)
    out = []
    for m in range(n_bins):
        members = idx == m
        count = int(members.sum())
        acc = float(log.correct[members].mean()) if count else 0.0
        conf = float(log.confidences[members].mean()) if count else 0.0
        out.append(
            BinStats(lo=m / n_bins, hi=(m + 1) / n_bins, count=count, acc=acc, conf=conf)
        )
    return out


def accuracy(log: PredictionLog) -> float:
    if len(log) == 0:
        raise EmptyLogError("empty prediction log")
    return float(log.correct.mean())


def error_rate(log: PredictionLog) -> float:
    return 1.0 - accuracy(log)


def unknown_top1_freq(log: PredictionLog) -> float:
    """Fraction of samples whose overall top-1 column (unknown included) is
    the unknown class. Zero for models without one."""
    if len(log) == 0:
        raise EmptyLogError("empty prediction log")
    if not log.has_unknown:
        return 0.0
    top = log.probs.argmax(axis=1)
    return float((top == log.probs.shape[1] - 1).mean())


def ece(log: PredictionLog, n_bins: int = 15) -> float:
    """Expected calibration error: bin-weight-averaged |acc - conf|."""
    n = len(log)
    total = 0.0
    for b in bin_equal_width(log, n_bins):
        if b.count:
            total += (b.count / n) * abs(b.acc - b.conf)
    return total


def mce(log: PredictionLog, n_bins: int = 15) -> float:
    """Maximum calibration error: the worst gap over non-empty bins."""
    gaps = [abs(b.acc - b.conf) for b in bin_equal_width(log, n_bins) if b.count]
    return max(gaps)


def ada_ece(log: PredictionLog, n_bins: int = 15) -> float:
    """ECE over equal-mass bins.

    Samples sort by confidence ascending (stable, so ties keep sample
    order) and split into M contiguous groups whose sizes differ by at most
    one, the first n mod M groups taking the extra sample.
    """
    n = len(log)
    if n == 0:
        raise EmptyLogError("empty prediction log")
    if n < n_bins:
        raise TooFewSamplesError(f"need >= {n_bins} samples, got {n}")
    order = np.argsort(log.confidences, kind="stable")
    conf = log.confidences[order]
    correct = log.correct[order]
    q, r = divmod(n, n_bins)
    total = 0.0
    start = 0
    for m in range(n_bins):
        size = q + 1 if m < r else q
        sl = slice(start, start + size)
        total += (size / n) * abs(correct[sl].mean() - conf[sl].mean())
        start += size
    return float(total)


def cw_ece(log: PredictionLog, n_bins: int = 15) -> float:
    """Class-wise ECE averaged over the real classes.

    For class k every sample contributes p(k) as confidence and 1(y = k)
    as correctness, binned equal-width like plain ECE. The unknown column
    never participates (it has no ground truth).
    """
    n = len(log)
    if n == 0:
        raise EmptyLogError("empty prediction log")
    c = log.n_real_classes
    total = 0.0
    for k in range(c):
        conf_k = log.probs[:, k]
        hit_k = log.labels == k
        idx = _bin_indices(conf_k, n_bins)
        class_total = 0.0
        for m in range(n_bins):
            members = idx == m
            count = int(members.sum())
            if count:
                gap = abs(hit_k[members].mean() - conf_k[members].mean())
                class_total += (count / n) * gap
        total += class_total
    return float(total / c)


@dataclass(frozen=True)
class ParetoPoint:
    """One model's position for selection: lower is better on both axes,
    cw_ece only breaks exact ties."""

    model_id: str
    error_rate: float
    ece: float
    cw_ece: float = 0.0


def _dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (
        a.error_rate <= b.error_rate
        and a.ece <= b.ece
        and (a.error_rate < b.error_rate or a.ece < b.ece)
    )


def pareto_front(points: list[ParetoPoint]) -> list[bool]:
    """Whether each point is non-dominated under (error_rate, ece)."""
    return [
        not any(_dominates(q, p) for q in points if q is not p)
        for p in points
    ]


def pareto_select(points: list[ParetoPoint]) -> str:
    """Front member closest to the origin; exact distance ties fall back to
    smaller cw_ece, then to model_id order."""
    if not points:
        raise EmptyLogError("no Pareto points")
    front = [p for p, on in zip(points, pareto_front(points)) if on]
    best = min(
        front,
        key=lambda p: (math.hypot(p.error_rate, p.ece), p.cw_ece, str(p.model_id)),
    )
    return best.model_id
