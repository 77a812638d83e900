import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from firerisk.data import CANONICAL_FEATURES, FeatureSchema, Sample, Stratum, from_arrays
from firerisk.forest import Internal, Leaf, Tree

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_sample(i, label, values=None, **kw):
    p = len(CANONICAL_FEATURES)
    base = dict(
        id=f"s{i}", lon=-120.0, lat=38.0, region_id="A", district_id="1",
        stratum=Stratum.FOREST, year=2024, label=label,
        values=tuple(values) if values is not None else tuple(float(i + j) for j in range(p)),
    )
    base.update(kw)
    return Sample(**base)


@pytest.fixture
def canonical_schema():
    return FeatureSchema.canonical()


@pytest.fixture
def stump():
    """x0 <= 2.5 -> 0.2, else 0.8; covers 2/2; one feature."""
    return Tree.from_root(Internal(0, 2.5, Leaf(0.2, 2), Leaf(0.8, 2)), 1)


def random_dataset(rng, n, p, regions=("A", "B", "C", "D"), years=(2024, 2025)):
    X = rng.normal(size=(n, p))
    logit = X[:, 0] - 0.5 * X[:, 1 % p]
    y = (rng.random(n) < 1 / (1 + np.exp(-2 * logit))).astype(int)
    return from_arrays(
        X, y,
        ids=[f"r{i}" for i in range(n)],
        region_ids=[regions[i % len(regions)] for i in range(n)],
        years=[years[(i // len(regions)) % len(years)] for i in range(n)],
    )


def random_tree(rng, p, max_depth, split_prob=0.8):
    """Random tree with integer covers; features may repeat along a path."""

    def grow(depth, cover):
        if depth >= max_depth or cover < 2 or rng.random() > split_prob:
            return Leaf(float(rng.random()), int(cover))
        left = int(rng.integers(1, cover))
        f = int(rng.integers(0, p))
        return Internal(f, float(np.round(rng.normal(), 2)), grow(depth + 1, left), grow(depth + 1, cover - left))

    return Tree.from_root(grow(0, int(rng.integers(20, 200))), p)


def random_input(rng, p):
    return np.round(rng.normal(size=p), 2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
