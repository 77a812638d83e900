"""Spatial-transfer and temporal-split evaluation with fold aggregation."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from firerisk._seeding import derive_seed
from firerisk.data import Dataset
from firerisk.errors import FireRiskError, ValidationError
from firerisk.forest import ForestParams, train_forest
from firerisk.metrics import DEFAULT_BINS, DEFAULT_K_GRID, EvalReport, evaluate, fmt

log = logging.getLogger(__name__)

SPATIAL = "spatial"
TEMPORAL = "temporal"
GRID_POINTS = 101


@dataclass(frozen=True)
class Fold:
    id: str
    train: frozenset
    test: frozenset


@dataclass(frozen=True)
class SplitPlan:
    """Selectors are region ids for spatial plans and years for temporal ones."""

    kind: str
    folds: tuple[Fold, ...]

    def __post_init__(self):
        if self.kind not in (SPATIAL, TEMPORAL):
            raise ValidationError(f"unknown plan kind {self.kind!r}")
        if not self.folds:
            raise ValidationError("a plan needs at least one fold")
        ids = [f.id for f in self.folds]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate fold ids: {ids}")
        for f in self.folds:
            if not f.train or not f.test:
                raise ValidationError(f"fold {f.id}: train and test selectors must be non-empty")
            overlap = f.train & f.test
            if overlap:
                raise ValidationError(f"fold {f.id}: train and test selectors overlap on {sorted(overlap)}")

    @classmethod
    def spatial(cls, train, test, fold_id="0") -> "SplitPlan":
        return cls(SPATIAL, (Fold(str(fold_id), frozenset(map(str, train)), frozenset(map(str, test))),))

    @classmethod
    def leave_one_region_out(cls, regions) -> "SplitPlan":
        regions = sorted(set(map(str, regions)))
        if len(regions) < 2:
            raise ValidationError("leave-one-region-out needs at least two regions")
        return cls(SPATIAL, tuple(
            Fold(r, frozenset(regions) - {r}, frozenset({r})) for r in regions
        ))

    @classmethod
    def temporal(cls, train_years, test_years) -> "SplitPlan":
        return cls(TEMPORAL, (Fold(
            "temporal", frozenset(int(y) for y in train_years), frozenset(int(y) for y in test_years)
        ),))

    @classmethod
    def from_dict(cls, d: dict, dataset: Dataset | None = None) -> "SplitPlan":
        """Build a plan from its JSON form.

        ``{"kind": "temporal", "train_years": [...], "test_years": [...]}``,
        ``{"kind": "spatial", "folds": [{"id": .., "train": [..], "test": [..]}]}`` or
        ``{"kind": "spatial", "leave_one_out": true}`` (regions taken from ``dataset``).
        """
        kind = d.get("kind")
        if kind == TEMPORAL:
            return cls.temporal(d["train_years"], d["test_years"])
        if kind == SPATIAL:
            if d.get("leave_one_out"):
                if dataset is None:
                    raise ValidationError("leave-one-out plans need the dataset to enumerate regions")
                return cls.leave_one_region_out(s.region_id for s in dataset)
            folds = tuple(
                Fold(str(f.get("id", i)), frozenset(map(str, f["train"])), frozenset(map(str, f["test"])))
                for i, f in enumerate(d.get("folds", []))
            )
            return cls(SPATIAL, folds)
        raise ValidationError(f"unknown plan kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == TEMPORAL:
            f = self.folds[0]
            return {"kind": TEMPORAL, "train_years": sorted(f.train), "test_years": sorted(f.test)}
        return {"kind": SPATIAL, "folds": [
            {"id": f.id, "train": sorted(f.train), "test": sorted(f.test)} for f in self.folds
        ]}


class Split(NamedTuple):
    train: Dataset
    test: Dataset
    dropped: int


def _check_no_leak(train: Dataset, test: Dataset, fold_id):
    leaked = set(train.ids) & set(test.ids)
    if leaked:
        raise ValidationError(f"fold {fold_id}: {len(leaked)} sample ids on both sides, e.g. {sorted(leaked)[:3]}")


def temporal_split(d: Dataset, train_years, test_years) -> Split:
    """Partition by year; rows in neither year set are dropped and counted."""
    train_years = {int(y) for y in train_years}
    test_years = {int(y) for y in test_years}
    if not train_years or not test_years:
        raise ValidationError("train and test year sets must be non-empty")
    if train_years & test_years:
        raise ValidationError(f"train and test years overlap on {sorted(train_years & test_years)}")
    train = d.where(lambda s: s.year in train_years)
    test = d.where(lambda s: s.year in test_years)
    dropped = len(d) - len(train) - len(test)
    if dropped:
        log.info("temporal split dropped %d samples outside years %s", dropped, sorted(train_years | test_years))
    if len(train) == 0 or len(test) == 0:
        raise ValidationError(f"empty side in temporal split: train={len(train)} test={len(test)}")
    _check_no_leak(train, test, "temporal")
    return Split(train, test, dropped)


def spatial_transfer_split(d: Dataset, plan: SplitPlan) -> list[Split]:
    if plan.kind != SPATIAL:
        raise ValidationError("spatial_transfer_split needs a spatial plan")
    present = {s.region_id for s in d}
    splits = []
    for f in plan.folds:
        unknown = (f.train | f.test) - present
        if unknown:
            raise ValidationError(f"fold {f.id}: unknown region ids {sorted(unknown)}")
        train = d.where(lambda s: s.region_id in f.train)
        test = d.where(lambda s: s.region_id in f.test)
        if len(train) == 0 or len(test) == 0:
            raise ValidationError(f"fold {f.id}: empty side (train={len(train)}, test={len(test)})")
        _check_no_leak(train, test, f.id)
        splits.append(Split(train, test, len(d) - len(train) - len(test)))
    return splits


def materialize(d: Dataset, plan: SplitPlan) -> list[Split]:
    if plan.kind == TEMPORAL:
        f = plan.folds[0]
        return [temporal_split(d, f.train, f.test)]
    return spatial_transfer_split(d, plan)


def holdout_split(d: Dataset, test_fraction: float, seed: int) -> Split:
    """Random within-sample holdout (no grouping)."""
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = len(d)
    perm = np.random.default_rng(derive_seed(seed, 0x401D)).permutation(n)
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ValidationError(f"holdout of {test_fraction} leaves an empty side for n={n}")
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return Split(d.subset(train_idx), d.subset(test_idx), 0)


# ---------------------------------------------------------------------------
# fold results and aggregation


@dataclass
class FoldResult:
    fold_id: str
    n_train: int
    n_test: int
    seed: int
    report: EvalReport

    @property
    def positive_rate(self) -> float:
        return self.report.positive_rate


@dataclass
class AggregatedCurves:
    """Pointwise mean and population SD across folds (SD is 0 for one fold)."""

    n_folds: int
    roc_grid: np.ndarray
    roc_mean: np.ndarray
    roc_sd: np.ndarray
    pr_grid: np.ndarray
    pr_mean: np.ndarray
    pr_sd: np.ndarray
    reliability: list = field(default_factory=list)
    topk: list = field(default_factory=list)
    scalars: dict = field(default_factory=dict)


def roc_on_grid(points, grid) -> np.ndarray:
    """TPR at each FPR in ``grid``; vertical segments take their upper end."""
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    keep = np.r_[fpr[1:] != fpr[:-1], True]
    return np.interp(grid, fpr[keep], tpr[keep])


def pr_on_grid(points, grid) -> np.ndarray:
    """Step-wise precision: the first curve point whose recall reaches r."""
    recall = np.array([p[0] for p in points])
    precision = np.array([p[1] for p in points])
    idx = np.searchsorted(recall, grid - 1e-12, side="left")
    return precision[np.minimum(idx, recall.size - 1)]


def _mean_sd(values):
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None, 0
    return float(v.mean()), float(v.std()), int(v.size)


SCALAR_KEYS = ("positive_rate", "roc_auc", "pr_auc", "brier", "accuracy", "precision", "recall", "f1")


def aggregate(folds: list[FoldResult]) -> AggregatedCurves:
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    rocs = [roc_on_grid(f.report.curves.roc, grid) for f in folds if f.report.curves.roc]
    prs = [pr_on_grid(f.report.curves.pr, grid) for f in folds if f.report.curves.pr]

    def stack(curves):
        if not curves:
            return np.full(grid.size, np.nan), np.full(grid.size, np.nan)
        a = np.vstack(curves)
        return a.mean(axis=0), a.std(axis=0)

    roc_mean, roc_sd = stack(rocs)
    pr_mean, pr_sd = stack(prs)

    reliability = []
    n_bins = len(folds[0].report.reliability.bins)
    for i in range(n_bins):
        bins = [f.report.reliability.bins[i] for f in folds]
        mp = _mean_sd(b.mean_predicted for b in bins)
        of = _mean_sd(b.observed_frequency for b in bins)
        reliability.append({
            "lower": bins[0].lower, "upper": bins[0].upper,
            "count": sum(b.count for b in bins), "folds": mp[2],
            "mean_predicted": mp[0], "observed_mean": of[0], "observed_sd": of[1],
        })

    topk = []
    curves = [f.report.topk for f in folds if f.report.topk is not None]
    if curves:
        for j, (k, _) in enumerate(curves[0].points):
            m, s, _ = _mean_sd(c.points[j][1] for c in curves)
            topk.append({"k_fraction": k, "captured_mean": m, "captured_sd": s})

    scalars = {}
    for key in SCALAR_KEYS:
        values = [f.report.scalars()[key] for f in folds]
        m, s, n = _mean_sd(values)
        scalars[key] = {"mean": m, "sd": s, "n": n}
    return AggregatedCurves(len(folds), grid, roc_mean, roc_sd, grid.copy(), pr_mean, pr_sd,
                            reliability, topk, scalars)


@dataclass
class ValidationRun:
    plan: SplitPlan
    mode: str
    folds: list[FoldResult]
    aggregate: AggregatedCurves
    dropped: dict

    @property
    def fold_sizes(self) -> dict:
        return {f.fold_id: {"train": f.n_train, "test": f.n_test} for f in self.folds}


def run_validation(
    d: Dataset,
    plan: SplitPlan,
    params: ForestParams = ForestParams(),
    mode: str = "retrain",
    threshold: float = 0.5,
    n_bins: int = DEFAULT_BINS,
    k_grid=DEFAULT_K_GRID,
    B: int = 0,
    level: float = 0.95,
    threads: int = 1,
) -> ValidationRun:
    """Train and score each fold, then aggregate.

    ``mode="retrain"`` fits a fresh forest per fold with a fold-derived seed;
    ``mode="shared"`` fits one forest per distinct training selector with the
    base seed and reuses it. ``B > 0`` adds bootstrap intervals per fold.
    """
    if mode not in ("retrain", "shared"):
        raise ValidationError(f"mode must be 'retrain' or 'shared', got {mode!r}")
    splits = materialize(d, plan)
    results = []
    shared = {}
    for i, (fold, split) in enumerate(zip(plan.folds, splits)):
        if mode == "retrain":
            seed = derive_seed(params.seed, i)
            fold_params = replace(params, seed=seed)
        else:
            seed = params.seed
            fold_params = params
        try:
            if mode == "shared" and fold.train in shared:
                model = shared[fold.train]
            else:
                model = train_forest(split.train, fold_params, threads=threads)
                if mode == "shared":
                    shared[fold.train] = model
            scores = model.predict_proba(split.test.X, threads=threads)
            report = evaluate(split.test.y, scores, threshold, n_bins, k_grid, B, level,
                              derive_seed(seed, 0xB007), threads=threads)
        except FireRiskError as exc:
            raise type(exc)(f"fold {fold.id}: {exc}") from exc
        for w in report.warnings:
            log.warning("fold %s: %s", fold.id, w)
        results.append(FoldResult(fold.id, len(split.train), len(split.test), seed, report))
    dropped = {f.id: s.dropped for f, s in zip(plan.folds, splits)}
    return ValidationRun(plan, mode, results, aggregate(results), dropped)


def dumps_aggregate(a: AggregatedCurves) -> str:
    """Key/value scalars followed by [roc]/[pr]/[reliability]/[topk] blocks."""
    out = io.StringIO()
    out.write("# firerisk aggregated validation report (SD across folds)\n")
    out.write(f"n_folds={a.n_folds}\n")
    for key, v in a.scalars.items():
        out.write(f"{key}_mean={fmt(v['mean'])}\n{key}_sd={fmt(v['sd'])}\n{key}_n={v['n']}\n")

    def nan_to_none(x):
        return None if np.isnan(x) else x

    out.write("[roc]\nfpr,tpr_mean,tpr_sd\n")
    for g, m, s in zip(a.roc_grid, a.roc_mean, a.roc_sd):
        out.write(f"{fmt(g)},{fmt(nan_to_none(m))},{fmt(nan_to_none(s))}\n")
    out.write("[pr]\nrecall,precision_mean,precision_sd\n")
    for g, m, s in zip(a.pr_grid, a.pr_mean, a.pr_sd):
        out.write(f"{fmt(g)},{fmt(nan_to_none(m))},{fmt(nan_to_none(s))}\n")
    out.write("[reliability]\nlower,upper,count,folds,mean_predicted,observed_mean,observed_sd\n")
    for r in a.reliability:
        out.write(",".join(fmt(r[k]) for k in
                           ("lower", "upper", "count", "folds", "mean_predicted", "observed_mean", "observed_sd")) + "\n")
    out.write("[topk]\nk_fraction,captured_mean,captured_sd\n")
    for r in a.topk:
        out.write(f"{fmt(r['k_fraction'])},{fmt(r['captured_mean'])},{fmt(r['captured_sd'])}\n")
    return out.getvalue()
