"""Binary and multi-label classification metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

N_BOOTSTRAP = 1000


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _pairs(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted 1/2."""
    s, y = _pairs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined AUROC: need both positive and negative labels")
    ranks = rankdata(s)  # mid-ranks
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_at(scores, labels, threshold: float) -> ConfusionCounts:
    s, y = _pairs(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return ConfusionCounts(tp, fp, int(y.size - tp - fp - fn), fn)


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise MetricError("sensitivity undefined without positives")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise MetricError("specificity undefined without negatives")
    return c.tn / (c.tn + c.fp)


def f1(c: ConfusionCounts) -> float:
    if c.tp == 0:
        return 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return 2 * precision * recall / (precision + recall)


def youden_threshold(scores, labels) -> float:
    """Threshold maximising sensitivity + specificity - 1; ties go to the lowest.

    Candidates are the observed scores (predict positive iff score >= t).
    """
    s, y = _pairs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("Youden threshold needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # keep the last index of each run of equal scores
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    cand, tp, fp = s_sorted[last], tp[last], fp[last]
    j = tp / n_pos - fp / n_neg
    best = j.max()
    # candidates are descending, so the lowest tied threshold is the last maximiser
    idx = np.flatnonzero(j == best)[-1]
    if best <= 0:
        log.warning("Youden J = %.3f <= 0: scores are uninformative or inverted", best)
    return float(cand[idx])


def bootstrap_ci(metric, data, n_resamples: int = N_BOOTSTRAP, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric(*resampled_columns)``.

    ``data`` is a tuple of equal-length arrays resampled jointly by row.
    Resamples on which the metric raises :class:`MetricError` are redrawn, up
    to ``10 * n_resamples`` draws in total.
    """
    if n_resamples < 100:
        raise MetricError("n_resamples must be >= 100")
    cols = [np.asarray(c) for c in data]
    n = len(cols[0])
    rng = np.random.default_rng(seed)
    values = []
    attempts = 0
    while len(values) < n_resamples:
        if attempts >= 10 * n_resamples:
            raise MetricError("degenerate data: too many undefined bootstrap resamples")
        attempts += 1
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric(*(c[idx] for c in cols)))
        except MetricError:
            continue
    lo, hi = np.quantile(np.asarray(values), [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


@dataclass
class LabelReport:
    index: int
    code: str
    name: str
    n_pos: int
    auroc: float
    ci_lo: float
    ci_hi: float
    threshold: float
    sensitivity: float
    specificity: float
    f1: float


def label_report(index, code, name, test_scores, test_labels, threshold,
                 n_resamples=N_BOOTSTRAP, seed=0) -> LabelReport:
    y = np.asarray(test_labels).astype(bool)
    nan = float("nan")
    if y.all() or not y.any():
        a = lo = hi = nan
    else:
        a = auroc(test_scores, y)
        lo, hi = bootstrap_ci(auroc, (test_scores, y), n_resamples, seed=seed)
    c = confusion_at(test_scores, y, threshold)
    sens = sensitivity(c) if c.tp + c.fn else nan
    spec = specificity(c) if c.tn + c.fp else nan
    return LabelReport(index, code, name, int(y.sum()), a, lo, hi, float(threshold), sens, spec, f1(c))


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def write_report_csv(rows: list[LabelReport], path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "code", "name", "n_pos", "auroc", "ci_lo", "ci_hi", "threshold",
                    "sensitivity", "specificity", "f1"])
        for r in rows:
            w.writerow([r.index, r.code, r.name, r.n_pos, _fmt(r.auroc), _fmt(r.ci_lo),
                        _fmt(r.ci_hi), _fmt(r.threshold), _fmt(r.sensitivity),
                        _fmt(r.specificity), _fmt(r.f1)])
