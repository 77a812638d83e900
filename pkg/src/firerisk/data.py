"""Samples, datasets and the delimited-text exchange format.

A dataset is an ordered table of presence (label 1) and absence (label 0)
observations. Every row carries the metadata the validation code groups on
(region, district, stratum, year) plus one value per schema feature.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from firerisk.errors import DataError

METADATA_COLUMNS = ("id", "lon", "lat", "region_id", "district_id", "stratum", "year", "label")

CANONICAL_FEATURES = (
    ("ndvi", "unitless"),
    ("evi", "unitless"),
    ("vci", "unitless"),
    ("lst", "K"),
    ("elevation", "m"),
    ("slope", "deg"),
    ("aspect", "deg"),
    ("soil_moisture", "m3/m3"),
    ("soc", "g/kg"),
    ("tree_cover", "%"),
    ("pop_density", "persons/km2"),
)

# Flat terrain has no aspect.
FLAT_ASPECT = -1.0

_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class Stratum(enum.Enum):
    FOREST = "forest"
    GRASSLAND = "grassland"

    @classmethod
    def from_nlcd(cls, code) -> "Stratum":
        code = int(code)
        if code in (41, 42, 43):
            return cls.FOREST
        if code == 71:
            return cls.GRASSLAND
        raise ValueError(f"NLCD class {code} is neither forest (41/42/43) nor grassland (71)")

    @classmethod
    def parse(cls, token: str) -> "Stratum":
        """Accept ``forest``/``grassland`` (any case) or an NLCD class code."""
        t = token.strip()
        try:
            return cls(t.lower())
        except ValueError:
            pass
        if t.isdigit():
            return cls.from_nlcd(t)
        raise ValueError(f"unknown stratum {token!r}")


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    units: tuple[str, ...] = ()

    def __post_init__(self):
        names = tuple(self.names)
        units = tuple(self.units) if self.units else ("",) * len(names)
        if not names:
            raise DataError("a feature schema needs at least one feature")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate feature names in schema: {names}")
        for n in names:
            if not _IDENTIFIER.match(n):
                raise DataError(f"feature name {n!r} is not an identifier")
        if len(units) != len(names):
            raise DataError("units must align with feature names")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "units", units)

    @classmethod
    def canonical(cls) -> "FeatureSchema":
        return cls(tuple(n for n, _ in CANONICAL_FEATURES), tuple(u for _, u in CANONICAL_FEATURES))

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "FeatureSchema":
        units = dict(CANONICAL_FEATURES)
        names = tuple(names)
        return cls(names, tuple(units.get(n, "") for n in names))

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def fingerprint(self) -> str:
        return ",".join(self.names)


@dataclass(frozen=True)
class Sample:
    id: str
    lon: float
    lat: float
    region_id: str
    district_id: str
    stratum: Stratum
    year: int
    label: int
    values: tuple[float, ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "lon", float(self.lon))
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "year", int(self.year))
        object.__setattr__(self, "label", int(self.label))
        if self.year <= 0:
            raise DataError(f"year must be positive, got {self.year}")
        if not all(math.isfinite(v) for v in self.values):
            raise DataError(f"sample {self.id!r} has non-finite feature values")


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    samples: tuple[Sample, ...] = field(default_factory=tuple)

    def __post_init__(self):
        samples = tuple(self.samples)
        p = len(self.schema)
        for s in samples:
            if len(s.values) != p:
                raise DataError(f"sample {s.id!r} has {len(s.values)} values, schema has {p}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @cached_property
    def X(self) -> np.ndarray:
        X = np.array([s.values for s in self.samples], dtype=np.float64).reshape(len(self.samples), len(self.schema))
        X.flags.writeable = False
        return X

    @cached_property
    def y(self) -> np.ndarray:
        y = np.array([s.label for s in self.samples], dtype=np.int8)
        y.flags.writeable = False
        return y

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, tuple(self.samples[i] for i in indices))

    def where(self, predicate) -> "Dataset":
        return Dataset(self.schema, tuple(s for s in self.samples if predicate(s)))


def positive_rate(d: Dataset) -> float:
    if len(d) == 0:
        raise DataError("positive rate of an empty dataset is undefined")
    return sum(s.label for s in d.samples) / len(d)


def stratify(d: Dataset, stratum: Stratum) -> Dataset:
    return d.where(lambda s: s.stratum is stratum)


def balanced_absence_sample(presence: Dataset, candidates: Dataset, seed: int) -> Dataset:
    """Presence rows plus an equal-sized uniform draw (without replacement)
    from the absence candidates. Chosen candidates keep their input order."""
    if presence.schema != candidates.schema:
        raise DataError("presence and candidate datasets use different schemas")
    if any(s.label != 1 for s in presence):
        raise DataError("presence dataset contains label-0 rows")
    if any(s.label != 0 for s in candidates):
        raise DataError("absence candidates contain label-1 rows")
    n = len(presence)
    if len(candidates) < n:
        raise DataError(f"insufficient absence candidates: need {n}, have {len(candidates)}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    chosen = np.sort(rng.choice(len(candidates), size=n, replace=False))
    return Dataset(presence.schema, presence.samples + tuple(candidates.samples[i] for i in chosen))


# ---------------------------------------------------------------------------
# delimited text


def _parse_number(cell: str, row: int, column: str) -> float:
    c = cell.strip()
    if not c:
        raise DataError("missing value", row, column)
    if not _NUMBER.match(c):
        raise DataError(f"non-numeric value {cell!r}", row, column)
    v = float(c)
    if not math.isfinite(v):
        raise DataError(f"value {cell!r} overflows", row, column)
    return v


def parse_samples_csv(text) -> Dataset:
    """Parse a samples table from a string or text stream.

    Metadata columns may appear in any order; every other column is a
    feature, in header order.
    """
    if isinstance(text, str):
        text = io.StringIO(text, newline="")
    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty file: header row is mandatory", 1) from None
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    if len(set(header)) != len(header):
        raise DataError(f"duplicate column names in header: {header}", 1)
    for col in METADATA_COLUMNS:
        if col not in header:
            raise DataError("missing mandatory column", 1, col)
    meta = {c: header.index(c) for c in METADATA_COLUMNS}
    feat_cols = [(i, h) for i, h in enumerate(header) if h not in meta]
    schema = FeatureSchema.from_names(h for _, h in feat_cols)

    samples = []
    for rowno, cells in enumerate(reader, start=2):
        if not cells or (len(cells) == 1 and not cells[0].strip()):
            continue
        if len(cells) != len(header):
            raise DataError(f"expected {len(header)} cells, found {len(cells)}", rowno)

        label_cell = cells[meta["label"]].strip()
        if label_cell not in ("0", "1"):
            raise DataError(f"label must be 0 or 1, got {label_cell!r}", rowno, "label")
        year_cell = cells[meta["year"]].strip()
        if not year_cell.isdigit() or int(year_cell) <= 0:
            raise DataError(f"year must be a positive integer, got {year_cell!r}", rowno, "year")
        try:
            stratum = Stratum.parse(cells[meta["stratum"]])
        except ValueError as exc:
            raise DataError(str(exc), rowno, "stratum") from None
        samples.append(
            Sample(
                id=cells[meta["id"]].strip(),
                lon=_parse_number(cells[meta["lon"]], rowno, "lon"),
                lat=_parse_number(cells[meta["lat"]], rowno, "lat"),
                region_id=cells[meta["region_id"]].strip(),
                district_id=cells[meta["district_id"]].strip(),
                stratum=stratum,
                year=int(year_cell),
                label=int(label_cell),
                values=tuple(_parse_number(cells[i], rowno, name) for i, name in feat_cols),
            )
        )
    return Dataset(schema, tuple(samples))


def read_samples_csv(path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_samples_csv(fh)


def write_samples_csv(d: Dataset, out=None) -> str | None:
    """Serialize ``d``; floats use the shortest round-trip representation.

    Returns the text when ``out`` is None, otherwise writes to the stream.
    """
    buf = io.StringIO() if out is None else out
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(METADATA_COLUMNS) + list(d.schema.names))
    for s in d.samples:
        w.writerow(
            [s.id, repr(float(s.lon)), repr(float(s.lat)), s.region_id, s.district_id, s.stratum.value, s.year, s.label]
            + [repr(float(v)) for v in s.values]
        )
    return buf.getvalue() if out is None else None


def complement_labels(d: Dataset) -> Dataset:
    return Dataset(d.schema, tuple(replace(s, label=1 - s.label) for s in d.samples))


def from_arrays(
    X: np.ndarray,
    y: Sequence[int],
    schema: FeatureSchema | None = None,
    *,
    ids=None,
    region_ids=None,
    district_ids=None,
    strata=None,
    years=None,
    lon=None,
    lat=None,
) -> Dataset:
    """Build a dataset from a feature matrix; unset metadata gets neutral defaults."""
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if schema is None:
        schema = FeatureSchema(tuple(f"f{j}" for j in range(p)))
    samples = tuple(
        Sample(
            id=str(ids[i]) if ids is not None else f"s{i}",
            lon=float(lon[i]) if lon is not None else 0.0,
            lat=float(lat[i]) if lat is not None else 0.0,
            region_id=str(region_ids[i]) if region_ids is not None else "R0",
            district_id=str(district_ids[i]) if district_ids is not None else "D0",
            stratum=strata[i] if strata is not None else Stratum.FOREST,
            year=int(years[i]) if years is not None else 2025,
            label=int(y[i]),
            values=tuple(X[i]),
        )
        for i in range(n)
    )
    return Dataset(schema, samples)
