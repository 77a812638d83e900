"""Evaluation metrics for binary probability forecasts.

Conventions used throughout:

* a score ``>= threshold`` is a positive prediction;
* quantities with a zero denominator are reported as ``None`` rather than
  being coerced to 0 or 1;
* curves are evaluated at every distinct score, highest first.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from firerisk._seeding import child_rng
from firerisk.errors import DataError

UNDEFINED = "undefined"
DEFAULT_BINS = 10
DEFAULT_K_GRID = tuple(np.arange(1, 21) / 20)


def _arrays(labels, scores):
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.ndim != 1 or s.ndim != 1:
        raise DataError("labels and scores must be one-dimensional")
    if y.shape != s.shape:
        raise DataError(f"length mismatch: {y.size} labels vs {s.size} scores")
    if y.size == 0:
        raise DataError("no observations")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise DataError("scores contain NaN")
    return y.astype(np.int64), s


def _check_probabilities(s):
    if ((s < 0) | (s > 1)).any():
        raise DataError("scores must lie in [0, 1]")


# ---------------------------------------------------------------------------
# confusion matrix


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class DerivedMetrics:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None


def confusion(labels, scores, threshold: float = 0.5) -> ConfusionMatrix:
    y, s = _arrays(labels, scores)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _ratio(a, b):
    return a / b if b else None


def derived_metrics(cm: ConfusionMatrix) -> DerivedMetrics:
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return DerivedMetrics(_ratio(cm.tp + cm.tn, cm.total), precision, recall, f1)


# ---------------------------------------------------------------------------
# ranking curves


def _distinct_steps(y, s):
    """Cumulative (tp, fp) after each distinct score, scores descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), y.size - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    return tp, fp, s_sorted[last]


def roc_curve(labels, scores) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points from (0, 0, inf) to (1, 1, min score)."""
    y, s = _arrays(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative labels")
    tp, fp, thr = _distinct_steps(y, s)
    pts = [(0.0, 0.0, math.inf)]
    pts += [(float(f / n_neg), float(t / n_pos), float(c)) for t, f, c in zip(tp, fp, thr)]
    return pts


def roc_auc(labels, scores) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via average ranks."""
    y, s = _arrays(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_curve_and_auc(labels, scores):
    """Precision-recall points and average precision.

    Returns ``(points, ap)`` where points are (recall, precision, threshold)
    and ``ap = sum((R_i - R_{i-1}) * P_i)`` with ``R_0 = 0``.
    """
    y, s = _arrays(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("PR curve needs at least one positive label")
    tp, fp, thr = _distinct_steps(y, s)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    pts = [(float(r), float(p), float(c)) for r, p, c in zip(recall, precision, thr)]
    return pts, ap


def pr_auc(labels, scores) -> float:
    return pr_curve_and_auc(labels, scores)[1]


@dataclass(frozen=True)
class CurveSet:
    roc: list
    pr: list
    roc_auc: float | None
    pr_auc: float | None


def curve_set(labels, scores) -> CurveSet:
    y, s = _arrays(labels, scores)
    n_pos = int(y.sum())
    roc, auc, pr, ap = [], None, [], None
    if 0 < n_pos < y.size:
        roc, auc = roc_curve(y, s), roc_auc(y, s)
    if n_pos > 0:
        pr, ap = pr_curve_and_auc(y, s)
    return CurveSet(roc, pr, auc, ap)


# ---------------------------------------------------------------------------
# calibration


def brier(labels, scores) -> float:
    y, s = _arrays(labels, scores)
    _check_probabilities(s)
    return float(np.mean((s - y) ** 2))


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_predicted: float | None
    observed_frequency: float | None

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass(frozen=True)
class ReliabilityBins:
    bins: list[ReliabilityBin]
    brier: float


def reliability_bins(labels, scores, n_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    """Equal-width bins; the top bin is closed at 1.0. Empty bins carry None."""
    if n_bins < 2:
        raise DataError(f"need at least 2 bins, got {n_bins}")
    y, s = _arrays(labels, scores)
    _check_probabilities(s)
    idx = np.minimum(np.floor(s * n_bins).astype(np.int64), n_bins - 1)
    # s * n_bins can round across an edge; settle against the exact edges
    idx = np.where(s < idx / n_bins, idx - 1, idx)
    idx = np.where((idx < n_bins - 1) & (s >= (idx + 1) / n_bins), idx + 1, idx)
    count = np.bincount(idx, minlength=n_bins)
    ssum = np.bincount(idx, weights=s, minlength=n_bins)
    ysum = np.bincount(idx, weights=y, minlength=n_bins)
    bins = []
    for i in range(n_bins):
        c = int(count[i])
        bins.append(ReliabilityBin(
            i / n_bins, (i + 1) / n_bins, c,
            float(ssum[i] / c) if c else None,
            float(ysum[i] / c) if c else None,
        ))
    return ReliabilityBins(bins, float(np.mean((s - y) ** 2)))


# ---------------------------------------------------------------------------
# top-k capture


@dataclass(frozen=True)
class TopKCurve:
    points: list[tuple[float, float]]

    def at(self, k: float) -> float:
        for kk, c in self.points:
            if math.isclose(kk, k):
                return c
        raise KeyError(k)


def _top_count(k, n):
    # ceil(k*n) without 0.15*100 -> 16 style rounding surprises
    return min(n, max(0, math.ceil(k * n - 1e-9)))


def topk_capture(labels, scores, k_grid=DEFAULT_K_GRID) -> TopKCurve:
    y, s = _arrays(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("top-k capture needs at least one positive label")
    ks = [float(k) for k in k_grid]
    if any(not 0 < k <= 1 for k in ks):
        raise DataError("k fractions must lie in (0, 1]")
    order = np.argsort(-s, kind="stable")
    captured = np.r_[0, np.cumsum(y[order])]
    return TopKCurve([(k, float(captured[_top_count(k, y.size)] / n_pos)) for k in ks])


# ---------------------------------------------------------------------------
# bootstrap


def _accuracy(y, s, threshold=0.5):
    return derived_metrics(confusion(y, s, threshold)).accuracy


def _precision(y, s, threshold=0.5):
    return derived_metrics(confusion(y, s, threshold)).precision


def _recall(y, s, threshold=0.5):
    return derived_metrics(confusion(y, s, threshold)).recall


def _f1(y, s, threshold=0.5):
    return derived_metrics(confusion(y, s, threshold)).f1


def _maybe(fn):
    def wrapped(y, s, threshold=0.5):
        try:
            return fn(y, s)
        except DataError:
            return None

    return wrapped


METRICS = {
    "roc_auc": _maybe(roc_auc),
    "pr_auc": _maybe(pr_auc),
    "brier": _maybe(brier),
    "accuracy": _accuracy,
    "precision": _precision,
    "recall": _recall,
    "f1": _f1,
}


@dataclass(frozen=True)
class BootstrapInterval:
    metric: str
    point: float
    lo: float
    hi: float
    sd: float
    B: int
    level: float
    seed: int
    skipped: int = 0


def bootstrap_ci(
    metric: str,
    labels,
    scores,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    threshold: float = 0.5,
    threads: int = 1,
) -> BootstrapInterval:
    """Percentile interval from class-stratified resamples.

    Positives and negatives are resampled separately so every replicate has
    the original class counts. Replicate ``b`` draws from a stream derived
    from ``(seed, b)``. Replicates where the metric is undefined are skipped
    and counted.
    """
    if metric not in METRICS:
        raise DataError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    if B < 100:
        raise DataError(f"need at least 100 bootstrap resamples, got {B}")
    if not 0 < level < 1:
        raise DataError(f"level must lie in (0, 1), got {level}")
    fn = METRICS[metric]
    y, s = _arrays(labels, scores)
    point = fn(y, s, threshold)
    if point is None:
        raise DataError(f"{metric} is undefined on the full sample")
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)

    def replicate(b):
        rng = child_rng(seed, b)
        idx = np.concatenate([
            pos[rng.integers(0, pos.size, pos.size)] if pos.size else pos,
            neg[rng.integers(0, neg.size, neg.size)] if neg.size else neg,
        ])
        return fn(y[idx], s[idx], threshold)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(replicate, range(B)))
    else:
        values = [replicate(b) for b in range(B)]
    kept = np.array([v for v in values if v is not None], dtype=np.float64)
    skipped = B - kept.size
    if kept.size == 0:
        raise DataError(f"{metric} was undefined on every resample")
    alpha = (1 - level) / 2
    lo, hi = np.quantile(kept, [alpha, 1 - alpha])
    return BootstrapInterval(metric, float(point), float(lo), float(hi), float(kept.std()), B, level, seed, skipped)


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    n: int
    positive_rate: float
    threshold: float
    confusion: ConfusionMatrix
    metrics: DerivedMetrics
    roc_auc: float | None
    pr_auc: float | None
    brier: float
    curves: CurveSet
    reliability: ReliabilityBins
    topk: TopKCurve | None
    intervals: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def scalars(self) -> dict:
        return {
            "n": self.n,
            "positive_rate": self.positive_rate,
            "threshold": self.threshold,
            "roc_auc": self.roc_auc,
            "pr_auc": self.pr_auc,
            "brier": self.brier,
            "accuracy": self.metrics.accuracy,
            "precision": self.metrics.precision,
            "recall": self.metrics.recall,
            "f1": self.metrics.f1,
            "tp": self.confusion.tp,
            "fp": self.confusion.fp,
            "fn": self.confusion.fn,
            "tn": self.confusion.tn,
        }


def evaluate(
    labels,
    scores,
    threshold: float = 0.5,
    n_bins: int = DEFAULT_BINS,
    k_grid=DEFAULT_K_GRID,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    bootstrap_metrics=("roc_auc", "pr_auc", "brier"),
    threads: int = 1,
) -> EvalReport:
    """Every metric for one test set. Undefined quantities are recorded as
    None together with a warning instead of raising."""
    y, s = _arrays(labels, scores)
    _check_probabilities(s)
    warnings = []
    n_pos = int(y.sum())
    curves = curve_set(y, s)
    if curves.roc_auc is None:
        warnings.append("ROC-AUC undefined: test labels contain a single class")
    if curves.pr_auc is None:
        warnings.append("PR-AUC and top-k capture undefined: no positive labels")
    cm = confusion(y, s, threshold)
    intervals = {}
    if B > 0:
        for m in bootstrap_metrics:
            try:
                intervals[m] = bootstrap_ci(m, y, s, B, level, seed, threshold, threads)
            except DataError as exc:
                warnings.append(f"no bootstrap interval for {m}: {exc}")
    return EvalReport(
        n=int(y.size),
        positive_rate=n_pos / y.size,
        threshold=threshold,
        confusion=cm,
        metrics=derived_metrics(cm),
        roc_auc=curves.roc_auc,
        pr_auc=curves.pr_auc,
        brier=brier(y, s),
        curves=curves,
        reliability=reliability_bins(y, s, n_bins),
        topk=topk_capture(y, s, k_grid) if n_pos else None,
        intervals=intervals,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# report text format: key=value lines followed by [section] CSV blocks


def fmt(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse_value(text: str):
    if text == UNDEFINED:
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def _block(out, name, header, rows):
    out.write(f"[{name}]\n")
    out.write(",".join(header) + "\n")
    for r in rows:
        out.write(",".join(fmt(v) for v in r) + "\n")


def dumps_report(r: EvalReport) -> str:
    out = io.StringIO()
    out.write("# firerisk evaluation report\n")
    for k, v in r.scalars().items():
        out.write(f"{k}={fmt(v)}\n")
    for w in r.warnings:
        out.write(f"warning={w}\n")
    _block(out, "bootstrap", ("metric", "point", "lo", "hi", "sd", "B", "level", "seed", "skipped"),
           [(i.metric, i.point, i.lo, i.hi, i.sd, i.B, i.level, i.seed, i.skipped) for i in r.intervals.values()])
    _block(out, "roc", ("fpr", "tpr", "threshold"), r.curves.roc)
    _block(out, "pr", ("recall", "precision", "threshold"), r.curves.pr)
    _block(out, "reliability", ("lower", "upper", "count", "mean_predicted", "observed_frequency"),
           [(b.lower, b.upper, b.count, b.mean_predicted, b.observed_frequency) for b in r.reliability.bins])
    _block(out, "topk", ("k_fraction", "captured_fraction"), r.topk.points if r.topk else [])
    return out.getvalue()


def loads_report(text: str) -> dict:
    """Parse a report into ``{"scalars": {...}, "warnings": [...], section: [rows]}``."""
    out = {"scalars": {}, "warnings": []}
    section = None
    header = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            out[section] = []
            header = None
            continue
        if section is None:
            key, _, value = line.partition("=")
            if key == "warning":
                out["warnings"].append(value)
            else:
                out["scalars"][key] = _parse_value(value)
        elif header is None:
            header = line.split(",")
        else:
            cells = line.split(",")
            row = {}
            for h, c in zip(header, cells):
                row[h] = c if h == "metric" else _parse_value(c)
            out[section].append(row)
    return out
