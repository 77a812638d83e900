import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from firerisk.errors import DataError
from firerisk.metrics import (
    UNDEFINED, ConfusionMatrix, bootstrap_ci, brier, confusion, curve_set, derived_metrics,
    dumps_report, evaluate, loads_report, pr_auc, pr_curve_and_auc, reliability_bins, roc_auc,
    roc_curve, topk_capture,
)

from oracles import pairwise_auc, step_average_precision, top_k_by_sorting

FOREST_COUNTS = ConfusionMatrix(tp=1874, fp=140, fn=5, tn=836)
GRASSLAND_COUNTS = ConfusionMatrix(tp=1900, fp=98, fn=29, tn=1399)


def hard_score_fixture(cm):
    labels = [1] * cm.tp + [1] * cm.fn + [0] * cm.fp + [0] * cm.tn
    scores = [1.0] * cm.tp + [0.0] * cm.fn + [1.0] * cm.fp + [0.0] * cm.tn
    return labels, scores


# -- confusion and derived metrics ------------------------------------------------

def test_confusion_reproduces_published_counts():
    for cm in (FOREST_COUNTS, GRASSLAND_COUNTS):
        assert confusion(*hard_score_fixture(cm), 0.5) == cm


def test_confusion_edge_cases():
    assert confusion([1, 1, 1], [1.0, 1.0, 1.0], 0.5).tp == 3
    cm = confusion([1, 0, 1], [0.2, 0.9, 1.0], 1.0 + 1e-9)
    assert cm.tp == cm.fp == 0
    assert confusion([1, 0], [0.5, 0.49], 0.5) == ConfusionMatrix(1, 0, 0, 1)
    with pytest.raises(DataError):
        confusion([1, 0], [0.5], 0.5)
    with pytest.raises(DataError):
        confusion([], [], 0.5)


@pytest.mark.parametrize("cm, expected", [
    (FOREST_COUNTS, (0.949, 0.930, 0.997, 0.963)),
    (GRASSLAND_COUNTS, (0.963, 0.951, 0.985, 0.968)),
])
def test_published_metric_arithmetic(cm, expected):
    m = derived_metrics(cm)
    for got, want in zip((m.accuracy, m.precision, m.recall, m.f1), expected):
        assert abs(got - want) <= 0.0005


def test_undefined_markers():
    m = derived_metrics(ConfusionMatrix(0, 0, 3, 2))
    assert m.precision is None and m.f1 is None and m.recall == 0.0
    m = derived_metrics(ConfusionMatrix(0, 2, 0, 2))
    assert m.recall is None
    m = derived_metrics(ConfusionMatrix(0, 1, 1, 0))
    assert m.precision == m.recall == m.f1 == 0.0


# -- ROC / PR ------------------------------------------------------------------------

def test_auc_examples():
    assert roc_auc([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.2]) == 0.75
    assert roc_auc([1, 0, 1, 0], [0.4] * 4) == 0.5
    assert roc_auc([1, 1, 0], [0.9, 0.8, 0.1]) == 1.0
    with pytest.raises(DataError):
        roc_auc([1, 1], [0.2, 0.3])


def test_pr_examples():
    assert pr_auc([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.2]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert pr_auc([1, 1, 0], [0.9, 0.8, 0.1]) == 1.0
    assert pr_auc([1, 0, 0, 1, 0], [0.3] * 5) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(DataError):
        pr_auc([0, 0], [0.1, 0.2])


def test_roc_curve_shape():
    pts = roc_curve([1, 0, 1, 0, 1], [0.9, 0.9, 0.5, 0.2, 0.1])
    assert pts[0][:2] == (0.0, 0.0) and pts[-1][:2] == (1.0, 1.0)
    fpr = [p[0] for p in pts]
    tpr = [p[1] for p in pts]
    assert fpr == sorted(fpr) and tpr == sorted(tpr)
    trapezoid = sum((fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2 for i in range(1, len(pts)))
    assert trapezoid == pytest.approx(roc_auc([1, 0, 1, 0, 1], [0.9, 0.9, 0.5, 0.2, 0.1]), abs=1e-15)


def test_pr_points_descend_in_threshold():
    pts, _ = pr_curve_and_auc([1, 0, 1, 1, 0], [0.8, 0.7, 0.7, 0.2, 0.1])
    thr = [p[2] for p in pts]
    assert thr == sorted(set(thr), reverse=True)


_labels_scores = st.integers(2, 120).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]) | st.floats(0, 1), min_size=n, max_size=n),
))


@settings(max_examples=80)
@given(_labels_scores)
def test_auc_matches_pairwise_oracle(ls):
    y, s = ls
    if 0 < sum(y) < len(y):
        assert abs(roc_auc(y, s) - float(pairwise_auc(y, s))) <= 1e-12
    if sum(y) > 0:
        assert abs(pr_auc(y, s) - float(step_average_precision(y, s))) <= 1e-12


@given(_labels_scores)
def test_auc_invariant_under_increasing_transform(ls):
    y, s = ls
    if not 0 < sum(y) < len(y):
        return
    # Exact transform: distinct scores map to distinct cubes of their dense rank.
    s = np.asarray(s)
    rank = np.searchsorted(np.unique(s), s).astype(float)
    assert roc_auc(y, s) == roc_auc(y, rank ** 3 + 0.5)


# -- calibration ------------------------------------------------------------------

def test_brier_examples():
    assert brier([1, 0], [1.0, 0.0]) == 0.0
    assert brier([1], [0.5]) == 0.25
    assert brier([1, 0], [0.8, 0.4]) == pytest.approx(0.10, abs=1e-15)
    with pytest.raises(DataError):
        brier([], [])
    with pytest.raises(DataError):
        brier([1], [1.2])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_brier_of_hard_scores_is_error_rate(pairs):
    y = [a for a, _ in pairs]
    s = [float(b) for _, b in pairs]
    assert brier(y, s) == pytest.approx(np.mean(np.array(y) != np.array(s)), abs=1e-15)


def test_reliability_examples():
    r = reliability_bins([0, 1, 1, 1], [0.05, 0.05, 0.95, 0.95], 10)
    b0, b9 = r.bins[0], r.bins[9]
    assert (b0.count, b0.mean_predicted, b0.observed_frequency) == (2, 0.05, 0.5)
    assert (b9.count, b9.mean_predicted, b9.observed_frequency) == (2, 0.95, 1.0)
    assert all(b.empty and b.mean_predicted is None for b in r.bins[1:9])
    assert reliability_bins([1], [1.0], 10).bins[9].count == 1
    one = reliability_bins([0, 1, 0], [0.41, 0.42, 0.43], 5)
    assert one.bins[2].count == 3
    with pytest.raises(DataError):
        reliability_bins([1], [0.5], 1)


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=80), st.integers(2, 20))
def test_reliability_partition(pairs, n_bins):
    y = [a for a, _ in pairs]
    s = [b for _, b in pairs]
    r = reliability_bins(y, s, n_bins)
    assert sum(b.count for b in r.bins) == len(y)
    for b in r.bins:
        if b.count:
            assert b.lower <= b.mean_predicted <= b.upper
    assert 0 <= r.brier <= 1


def test_calibrated_scores_stay_within_three_sd():
    rng = np.random.default_rng(11)
    s = rng.random(10_000)
    y = (rng.random(s.size) < s).astype(int)
    for b in reliability_bins(y, s, 10).bins:
        sd = math.sqrt(b.mean_predicted * (1 - b.mean_predicted) / b.count)
        assert abs(b.observed_frequency - b.mean_predicted) <= 3 * sd


# -- top-k ------------------------------------------------------------------------

def test_topk_examples():
    c = topk_capture([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.6], [0.5, 1.0])
    assert c.at(0.5) == 0.5 and c.at(1.0) == 1.0
    assert topk_capture([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1], [0.5]).at(0.5) == 1.0
    assert topk_capture([0, 1, 0, 0, 0] * 20, np.linspace(1, 0, 100), [0.15]).at(0.15) == 0.15
    with pytest.raises(DataError):
        topk_capture([0, 0], [0.1, 0.2])
    with pytest.raises(DataError):
        topk_capture([1, 0], [0.1, 0.2], [0.0])


@given(_labels_scores)
def test_topk_monotone_and_matches_sort_oracle(ls):
    y, s = ls
    if sum(y) == 0:
        return
    c = topk_capture(y, s)
    caps = [v for _, v in c.points]
    assert caps == sorted(caps) and caps[-1] == 1.0
    for k, v in c.points:
        assert v == float(top_k_by_sorting(y, s, k))


# -- bootstrap --------------------------------------------------------------------

def _fixture200(seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 200)
    s = np.clip(0.5 * y + rng.normal(0.25, 0.25, 200), 0, 1)
    return y, s


def test_bootstrap_contains_point_and_is_deterministic():
    y, s = _fixture200()
    a = bootstrap_ci("roc_auc", y, s, B=300, seed=5)
    assert a.lo <= a.point <= a.hi
    assert a == bootstrap_ci("roc_auc", y, s, B=300, seed=5)
    assert a == bootstrap_ci("roc_auc", y, s, B=300, seed=5, threads=4)
    assert a != bootstrap_ci("roc_auc", y, s, B=300, seed=6)


def test_bootstrap_degenerate_data():
    ci = bootstrap_ci("accuracy", [1, 1, 0, 0], [1.0, 1.0, 0.0, 0.0], B=100)
    assert ci.lo == ci.hi == ci.point == 1.0


def test_bootstrap_errors():
    with pytest.raises(DataError):
        bootstrap_ci("roc_auc", [1, 1], [0.1, 0.2], B=100)
    with pytest.raises(DataError):
        bootstrap_ci("roc_auc", [1, 0], [0.1, 0.2], B=99)
    with pytest.raises(DataError):
        bootstrap_ci("nope", [1, 0], [0.1, 0.2], B=100)


def test_bootstrap_preserves_class_counts():
    y, s = _fixture200(1)
    ci = bootstrap_ci("precision", y, s, B=200, threshold=0.99)
    assert ci.skipped >= 0 and ci.lo <= ci.hi


# -- report -----------------------------------------------------------------------

def test_report_round_trip_and_undefined():
    y, s = _fixture200(2)
    r = evaluate(y, s, B=100, seed=1)
    parsed = loads_report(dumps_report(r))
    assert parsed["scalars"]["roc_auc"] == r.roc_auc
    assert len(parsed["roc"]) == len(r.curves.roc)
    assert [row["metric"] for row in parsed["bootstrap"]] == ["roc_auc", "pr_auc", "brier"]

    single = evaluate([1, 1, 1], [0.2, 0.6, 0.9], B=100)
    text = dumps_report(single)
    assert f"roc_auc={UNDEFINED}" in text
    assert single.warnings
    assert loads_report(text)["scalars"]["roc_auc"] is None


def test_curve_set_of_single_class():
    cs = curve_set([0, 0], [0.1, 0.2])
    assert cs.roc_auc is None and cs.pr_auc is None and cs.roc == []
