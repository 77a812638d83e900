"""Exact Shapley attributions for forest probabilities.

The value of a coalition ``S`` is the tree's output when only the features
in ``S`` are known and unknown splits are averaged by training cover. The
compiled TreeSHAP kernel and :func:`brute_force_shap` share that value
function, so they must agree to rounding.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from firerisk import _kernels
from firerisk.data import Dataset
from firerisk.errors import DataError, ModelError
from firerisk.forest import Forest, Tree, _check_matrix

MAX_BRUTE_FORCE_FEATURES = 15


@dataclass(frozen=True)
class ShapExplanation:
    base_value: float
    contributions: np.ndarray
    prediction: float

    @property
    def efficiency_gap(self) -> float:
        return abs(self.base_value + float(np.sum(self.contributions)) - self.prediction)


@dataclass(frozen=True)
class ImportanceRow:
    feature: str
    mean_abs_shap: float
    rank: int


@dataclass(frozen=True)
class BeeswarmRecord:
    sample_id: str
    feature: str
    value: float
    shap: float


@dataclass(frozen=True)
class ForceDecomposition:
    base_value: float
    prediction: float
    contributions: list[tuple[str, float]]


def _check_vector(x, p):
    return _check_matrix(np.asarray(x, dtype=np.float64).reshape(1, -1) if np.ndim(x) == 1 else x, p)[0]


def tree_expected_value(t: Tree, x, known) -> float:
    """Output of ``t`` at ``x`` when only features in ``known`` are observed."""
    x = _check_vector(x, t.n_features)
    known = frozenset(int(j) for j in known)

    def descend(i):
        if t.left[i] < 0:
            return float(t.value[i])
        f = int(t.feature[i])
        if f in known:
            return descend(t.left[i] if x[f] <= t.threshold[i] else t.right[i])
        l, r = t.left[i], t.right[i]
        c = t.cover[i]
        return (t.cover[l] / c) * descend(l) + (t.cover[r] / c) * descend(r)

    return descend(0)


def brute_force_shap(t: Tree, x) -> ShapExplanation:
    """Shapley values by enumerating every coalition (exponential in p)."""
    p = t.n_features
    if p > MAX_BRUTE_FORCE_FEATURES:
        raise ModelError(f"brute-force enumeration is limited to {MAX_BRUTE_FORCE_FEATURES} features, got {p}")
    x = _check_vector(x, p)
    v = {}
    for size in range(p + 1):
        for S in combinations(range(p), size):
            v[frozenset(S)] = tree_expected_value(t, x, S)
    fact = [math.factorial(k) for k in range(p + 1)]
    phi = np.zeros(p)
    for i in range(p):
        others = [j for j in range(p) if j != i]
        acc = 0.0
        for size in range(p):
            w = fact[size] * fact[p - size - 1] / fact[p]
            for S in combinations(others, size):
                S = frozenset(S)
                acc += w * (v[S | {i}] - v[S])
        phi[i] = acc
    return ShapExplanation(v[frozenset()], phi, v[frozenset(range(p))])


def _tree_base(t: Tree) -> float:
    return float(_kernels.expected_value(t.left, t.right, t.value, t.cover))


def _tree_phi(t: Tree, X: np.ndarray) -> np.ndarray:
    return _kernels.tree_shap_batch(t.left, t.right, t.feature, t.threshold, t.value, t.cover, X, t.max_depth)


def tree_shap(t: Tree, x) -> ShapExplanation:
    x = _check_vector(x, t.n_features)
    phi = _tree_phi(t, x.reshape(1, -1))[0]
    return ShapExplanation(_tree_base(t), phi, float(t.predict(x)[0]))


def forest_shap_batch(f: Forest, X, threads: int = 1):
    """Explain every row of ``X``.

    Returns ``(base_value, phi, predictions)`` with ``phi`` of shape (n, p).
    Trees are summed in a fixed order regardless of ``threads``.
    """
    X = _check_matrix(X, f.n_features)

    def run(rows):
        acc = np.zeros((len(rows), f.n_features))
        Xs = np.ascontiguousarray(X[rows])
        for t in f.trees:
            acc += _tree_phi(t, Xs)
        return acc

    if threads > 1 and X.shape[0] >= 2 * threads:
        blocks = np.array_split(np.arange(X.shape[0]), threads)
        with ThreadPoolExecutor(threads) as pool:
            phi = np.concatenate(list(pool.map(run, blocks)))
    else:
        phi = run(np.arange(X.shape[0]))
    k = len(f.trees)
    base = sum(_tree_base(t) for t in f.trees) / k
    return base, phi / k, f.predict_proba(X)


def forest_shap(f: Forest, x) -> ShapExplanation:
    x = _check_vector(x, f.n_features)
    base, phi, pred = forest_shap_batch(f, x.reshape(1, -1))
    return ShapExplanation(base, phi[0], float(pred[0]))


def rank_importance(names, mean_abs) -> list[ImportanceRow]:
    """Descending by magnitude; ties go to the lower feature index."""
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], j))
    rank = {j: r + 1 for r, j in enumerate(order)}
    return [ImportanceRow(names[j], float(mean_abs[j]), rank[j]) for j in order]


def importance_table(f: Forest, d: Dataset, threads: int = 1) -> list[ImportanceRow]:
    """Mean |SHAP| per feature over the rows of ``d``, most important first."""
    if len(d) == 0:
        raise DataError("cannot compute importance on an empty dataset")
    _, phi, _ = forest_shap_batch(f, d.X, threads)
    return rank_importance(list(f.schema.names), np.abs(phi).mean(axis=0))


def beeswarm_export(f: Forest, d: Dataset, threads: int = 1) -> list[BeeswarmRecord]:
    if len(d) == 0:
        raise DataError("cannot export SHAP values for an empty dataset")
    _, phi, _ = forest_shap_batch(f, d.X, threads)
    return beeswarm_records(d, phi)


def beeswarm_records(d: Dataset, phi: np.ndarray) -> list[BeeswarmRecord]:
    """One record per (sample, feature) from a precomputed SHAP matrix."""
    names = d.schema.names
    return [
        BeeswarmRecord(s.id, names[j], float(s.values[j]), float(phi[i, j]))
        for i, s in enumerate(d.samples)
        for j in range(len(names))
    ]


def force_decomposition(f: Forest, x) -> ForceDecomposition:
    """Non-zero contributions, largest magnitude first (ties by feature name)."""
    e = forest_shap(f, x)
    items = [(n, float(v)) for n, v in zip(f.schema.names, e.contributions) if v != 0.0]
    items.sort(key=lambda kv: (-abs(kv[1]), kv[0]))
    return ForceDecomposition(e.base_value, e.prediction, items)


# ---------------------------------------------------------------------------
# delimited exports

BEESWARM_COLUMNS = ("sample_id", "feature", "value", "shap")
IMPORTANCE_COLUMNS = ("feature", "mean_abs_shap", "rank")
FORCE_COLUMNS = ("feature", "contribution")
FORCE_BASE_ROW = "(base)"
FORCE_PREDICTION_ROW = "(prediction)"


def _writer(out):
    return csv.writer(out, lineterminator="\n")


def write_beeswarm_csv(records, out) -> None:
    w = _writer(out)
    w.writerow(BEESWARM_COLUMNS)
    for r in records:
        w.writerow([r.sample_id, r.feature, repr(r.value), repr(r.shap)])


def parse_beeswarm_csv(text) -> list[BeeswarmRecord]:
    if isinstance(text, str):
        text = io.StringIO(text)
    rows = csv.reader(text)
    header = next(rows)
    if tuple(header) != BEESWARM_COLUMNS:
        raise DataError(f"unexpected beeswarm header {header}", 1)
    return [BeeswarmRecord(a, b, float(c), float(e)) for a, b, c, e in rows]


def importance_from_beeswarm(records, names) -> list[ImportanceRow]:
    """Re-aggregate exported records into an importance table."""
    sums = dict.fromkeys(names, 0.0)
    counts = dict.fromkeys(names, 0)
    for r in records:
        sums[r.feature] += abs(r.shap)
        counts[r.feature] += 1
    return rank_importance(list(names), [sums[n] / counts[n] if counts[n] else 0.0 for n in names])


def write_importance_csv(table, out) -> None:
    w = _writer(out)
    w.writerow(IMPORTANCE_COLUMNS)
    for r in table:
        w.writerow([r.feature, repr(r.mean_abs_shap), r.rank])


def parse_importance_csv(text) -> list[ImportanceRow]:
    if isinstance(text, str):
        text = io.StringIO(text)
    rows = csv.reader(text)
    header = next(rows)
    if tuple(header) != IMPORTANCE_COLUMNS:
        raise DataError(f"unexpected importance header {header}", 1)
    return [ImportanceRow(a, float(b), int(c)) for a, b, c in rows]


def write_force_csv(fd: ForceDecomposition, out) -> None:
    """Contributions framed by a leading base row and a trailing prediction row."""
    w = _writer(out)
    w.writerow(FORCE_COLUMNS)
    w.writerow([FORCE_BASE_ROW, repr(fd.base_value)])
    for name, v in fd.contributions:
        w.writerow([name, repr(v)])
    w.writerow([FORCE_PREDICTION_ROW, repr(fd.prediction)])


def parse_force_csv(text) -> ForceDecomposition:
    if isinstance(text, str):
        text = io.StringIO(text)
    rows = list(csv.reader(text))
    if not rows or tuple(rows[0]) != FORCE_COLUMNS:
        raise DataError("unexpected force header", 1)
    body = rows[1:]
    if len(body) < 2 or body[0][0] != FORCE_BASE_ROW or body[-1][0] != FORCE_PREDICTION_ROW:
        raise DataError("force table must start with the base row and end with the prediction row")
    return ForceDecomposition(float(body[0][1]), float(body[-1][1]), [(n, float(v)) for n, v in body[1:-1]])
