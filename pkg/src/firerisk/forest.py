"""CART trees (Gini impurity) bagged into a probability forest.

Trees are stored as flat preorder arrays so compiled kernels can walk
them; :class:`Leaf` / :class:`Internal` give a nested view for building
trees by hand and for reading them back.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from firerisk import _kernels
from firerisk._seeding import child_rng
from firerisk.data import Dataset, FeatureSchema
from firerisk.errors import ModelError

FORMAT_NAME = "firerisk-forest"
FORMAT_VERSION = 1
NODE_FIELDS = ("id", "feature", "threshold", "left", "right", "cover", "value")
UNLIMITED_DEPTH = 2**31 - 1


@dataclass(frozen=True)
class Leaf:
    value: float
    cover: int = 1


@dataclass(frozen=True)
class Internal:
    feature: int
    threshold: float
    left: "Node"
    right: "Node"
    cover: int | None = None

    def __post_init__(self):
        if self.cover is None:
            object.__setattr__(self, "cover", self.left.cover + self.right.cover)


Node = Union[Leaf, Internal]


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Tree:
    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    n_features: int
    schema_fingerprint: str = ""

    def __post_init__(self):
        for name, dt in (("left", np.int64), ("right", np.int64), ("feature", np.int64),
                         ("threshold", np.float64), ("value", np.float64), ("cover", np.int64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dt))
        self.check()

    def check(self):
        """Raise ModelError unless the structural invariants hold."""
        n = len(self.left)
        if n == 0:
            raise ModelError("tree has no nodes")
        if not all(len(a) == n for a in (self.right, self.feature, self.threshold, self.value, self.cover)):
            raise ModelError("tree arrays differ in length")
        if (self.cover < 1).any():
            raise ModelError("every node must cover at least one training row")
        internal = self.left >= 0
        if ((self.right >= 0) != internal).any():
            raise ModelError("node has exactly one child")
        if internal.any():
            li, ri = self.left[internal], self.right[internal]
            idx = np.flatnonzero(internal)
            if (li <= idx).any() or (ri <= idx).any() or (li >= n).any() or (ri >= n).any():
                raise ModelError("children must follow their parent in node order")
            if (self.cover[internal] != self.cover[li] + self.cover[ri]).any():
                raise ModelError("internal cover differs from the sum of its children")
            f = self.feature[internal]
            if (f < 0).any() or (f >= self.n_features).any():
                raise ModelError("split feature index out of range")
            if not np.isfinite(self.threshold[internal]).all():
                raise ModelError("split thresholds must be finite")
        leaves = ~internal
        v = self.value[leaves]
        if not ((v >= 0) & (v <= 1)).all():
            raise ModelError("leaf values must lie in [0, 1]")

    @classmethod
    def from_root(cls, root: Node, n_features: int, schema_fingerprint: str = "") -> "Tree":
        rows = []

        def visit(node):
            i = len(rows)
            rows.append(None)
            if isinstance(node, Leaf):
                rows[i] = (-1, -1, -1, 0.0, float(node.value), int(node.cover))
                return i
            l = visit(node.left)
            r = visit(node.right)
            rows[i] = (l, r, int(node.feature), float(node.threshold),
                       _cover_mean(node, rows, l, r), int(node.cover))
            return i

        visit(root)
        cols = list(zip(*rows))
        return cls(
            left=cols[0], right=cols[1], feature=cols[2], threshold=cols[3],
            value=cols[4], cover=cols[5], n_features=n_features, schema_fingerprint=schema_fingerprint,
        )

    @property
    def root(self) -> Node:
        def build(i):
            if self.left[i] < 0:
                return Leaf(float(self.value[i]), int(self.cover[i]))
            return Internal(int(self.feature[i]), float(self.threshold[i]),
                            build(self.left[i]), build(self.right[i]), int(self.cover[i]))

        return build(0)

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    @property
    def max_depth(self) -> int:
        return int(_kernels.max_depth_of(self.left, self.right))

    def predict(self, X) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        return _kernels.predict_tree(self.left, self.right, self.feature, self.threshold, self.value, X)

    def used_features(self) -> set[int]:
        return set(int(f) for f in self.feature[self.left >= 0])

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return (
            self.n_features == other.n_features
            and self.schema_fingerprint == other.schema_fingerprint
            and all(np.array_equal(getattr(self, a), getattr(other, a))
                    for a in ("left", "right", "feature", "threshold", "value", "cover"))
        )

    __hash__ = None


def _cover_mean(node, rows, l, r):
    # internal-node value: cover-weighted mean of the children (informational only)
    cl, cr = rows[l][5], rows[r][5]
    return (rows[l][4] * cl + rows[r][4] * cr) / (cl + cr)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int | None = 12
    min_samples_leaf: int = 5
    mtry: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def resolved(self, n_features: int) -> "ForestParams":
        """Fill in ``mtry = ceil(sqrt(p))`` and validate against the schema."""
        mtry = self.mtry if self.mtry is not None else math.ceil(math.sqrt(n_features))
        out = ForestParams(self.n_trees, self.max_depth, self.min_samples_leaf, mtry, self.bootstrap, self.seed)
        if out.n_trees < 1:
            raise ModelError(f"n_trees must be >= 1, got {out.n_trees}")
        if out.max_depth is not None and out.max_depth < 1:
            raise ModelError(f"max_depth must be >= 1, got {out.max_depth}")
        if out.min_samples_leaf < 1:
            raise ModelError(f"min_samples_leaf must be >= 1, got {out.min_samples_leaf}")
        if not 1 <= out.mtry <= n_features:
            raise ModelError(f"mtry must lie in [1, {n_features}], got {out.mtry}")
        return out


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple[Tree, ...]
    params: ForestParams
    schema: FeatureSchema

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if not self.trees:
            raise ModelError("a forest needs at least one tree")
        fp = self.schema.fingerprint()
        for t in self.trees:
            if t.n_features != len(self.schema) or (t.schema_fingerprint and t.schema_fingerprint != fp):
                raise ModelError("tree schema does not match forest schema")

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def predict_proba(self, X, threads: int = 1) -> np.ndarray:
        """Mean leaf value over trees for each row of ``X``."""
        X = _check_matrix(X, self.n_features)
        if threads > 1 and X.shape[0] >= 2 * threads:
            blocks = np.array_split(np.arange(X.shape[0]), threads)
            with ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(lambda b: self._predict(X[b]), blocks))
            return np.concatenate(parts)
        return self._predict(X)

    def _predict(self, X):
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += _kernels.predict_tree(t.left, t.right, t.feature, t.threshold, t.value, X)
        return total / len(self.trees)

    def __eq__(self, other):
        if not isinstance(other, Forest):
            return NotImplemented
        return self.params == other.params and self.schema == other.schema and self.trees == other.trees

    __hash__ = None


def _check_matrix(X, p):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != p:
        raise ModelError(f"expected {p} features, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ModelError("feature values must be finite")
    return np.ascontiguousarray(X)


def _grow(X, y, rows, params: ForestParams, rng: np.random.Generator, fingerprint: str) -> Tree:
    depth = UNLIMITED_DEPTH if params.max_depth is None else params.max_depth
    # every split attempt consumes mtry draws; attempts <= nodes <= 2n - 1
    uniforms = rng.random(2 * len(rows) * params.mtry)
    l, r, f, t, v, c, _ = _kernels.build_tree(
        X, y, rows, depth, params.min_samples_leaf, params.mtry, uniforms
    )
    return Tree(l, r, f, t, v, c, X.shape[1], fingerprint)


def train_tree(data: Dataset, params: ForestParams, rng: np.random.Generator) -> Tree:
    """Greedy Gini CART on all rows of ``data`` (no resampling)."""
    if len(data) == 0:
        raise ModelError("cannot train a tree on an empty dataset")
    params = params.resolved(len(data.schema))
    X = np.ascontiguousarray(data.X)
    y = data.y.astype(np.int64)
    return _grow(X, y, np.arange(len(data), dtype=np.int64), params, rng, data.schema.fingerprint())


def tree_rng(seed: int, t: int) -> np.random.Generator:
    return child_rng(seed, t)


def train_forest(data: Dataset, params: ForestParams = ForestParams(), threads: int = 1) -> Forest:
    """Bagged forest; tree ``t`` depends only on ``(params.seed, t)``."""
    n = len(data)
    if n < 2:
        raise ModelError(f"need at least 2 samples to train a forest, got {n}")
    y = data.y.astype(np.int64)
    if y.min() == y.max():
        raise ModelError(f"training data holds a single class (label {int(y[0])}); probabilities would be degenerate")
    params = params.resolved(len(data.schema))
    X = np.ascontiguousarray(data.X)
    fp = data.schema.fingerprint()

    def one(t):
        rng = tree_rng(params.seed, t)
        rows = rng.integers(0, n, n) if params.bootstrap else np.arange(n, dtype=np.int64)
        return _grow(X, y, rows.astype(np.int64), params, rng, fp)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(t) for t in range(params.n_trees)]
    return Forest(tuple(trees), params, data.schema)


def predict_proba(f: Forest, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ModelError("predict_proba takes a single feature vector")
    return float(f.predict_proba(x)[0])


def predict_label(f: Forest, x, threshold: float = 0.5) -> int:
    if not 0.0 <= threshold <= 1.0:
        raise ModelError(f"threshold must lie in [0, 1], got {threshold}")
    return int(predict_proba(f, x) >= threshold)


# ---------------------------------------------------------------------------
# serialization


def _num(v: float):
    # json writes floats via repr, the shortest string that round-trips
    return float(v)


def forest_to_dict(f: Forest) -> dict:
    trees = []
    for t in f.trees:
        nodes = []
        for i in range(t.n_nodes):
            leaf = t.left[i] < 0
            nodes.append([
                i,
                -1 if leaf else int(t.feature[i]),
                None if leaf else _num(t.threshold[i]),
                int(t.left[i]),
                int(t.right[i]),
                int(t.cover[i]),
                _num(t.value[i]),
            ])
        trees.append({"nodes": nodes})
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "schema": {"names": list(f.schema.names), "units": list(f.schema.units)},
        "params": asdict(f.params),
        "node_fields": list(NODE_FIELDS),
        "trees": trees,
    }


def dumps_forest(f: Forest) -> str:
    d = forest_to_dict(f)
    head = {k: v for k, v in d.items() if k != "trees"}
    # one tree per line keeps files diffable
    lines = [json.dumps(t, separators=(",", ":")) for t in d["trees"]]
    body = json.dumps(head, separators=(",", ":"))[:-1]
    return body + ',"trees":[\n' + ",\n".join(lines) + "\n]}\n"


def loads_forest(text: str) -> Forest:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"forest file is not valid JSON: {exc}") from None
    if d.get("format") != FORMAT_NAME:
        raise ModelError(f"not a {FORMAT_NAME} file")
    if d.get("version") != FORMAT_VERSION:
        raise ModelError(f"unsupported forest format version {d.get('version')}")
    schema = FeatureSchema(tuple(d["schema"]["names"]), tuple(d["schema"]["units"]))
    params = ForestParams(**d["params"])
    fields_ = d.get("node_fields", list(NODE_FIELDS))
    col = {name: fields_.index(name) for name in NODE_FIELDS}
    trees = []
    for td in d["trees"]:
        nodes = sorted(td["nodes"], key=lambda r: r[col["id"]])
        if [r[col["id"]] for r in nodes] != list(range(len(nodes))):
            raise ModelError("node ids must be 0..n-1")
        thr = [0.0 if r[col["threshold"]] is None else r[col["threshold"]] for r in nodes]
        trees.append(Tree(
            left=[r[col["left"]] for r in nodes],
            right=[r[col["right"]] for r in nodes],
            feature=[r[col["feature"]] for r in nodes],
            threshold=thr,
            value=[r[col["value"]] for r in nodes],
            cover=[r[col["cover"]] for r in nodes],
            n_features=len(schema),
            schema_fingerprint=schema.fingerprint(),
        ))
    return Forest(tuple(trees), params, schema)


def save_forest(f: Forest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_forest(f))


def load_forest(path) -> Forest:
    with open(path, encoding="utf-8") as fh:
        return loads_forest(fh.read())


def forest_from_trees(trees, schema: FeatureSchema, params: ForestParams | None = None) -> Forest:
    """Wrap hand-built trees (e.g. from :meth:`Tree.from_root`) as a forest."""
    trees = tuple(trees)
    if params is None:
        params = ForestParams(n_trees=len(trees), mtry=len(schema), bootstrap=False)
    return Forest(trees, params, schema)
