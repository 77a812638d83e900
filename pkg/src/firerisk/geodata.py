"""Grid rasters, wall-to-wall prediction, risk zonation and synthetic landscapes.

Grids are single-band, north row first, in a projected metric coordinate
system; areas are planar (``cells * cellsize**2``).
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from firerisk._seeding import child_rng
from firerisk.data import Dataset, FeatureSchema, Sample, Stratum
from firerisk.errors import RasterError
from firerisk.forest import Forest

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")
DEFAULT_NODATA = -9999.0
DEFAULT_CUTOFFS = (1 / 3, 2 / 3)
RISK_CLASSES = (1, 2, 3)


@dataclass(frozen=True, eq=False)
class GridRaster:
    ncols: int
    nrows: int
    xllcorner: float
    yllcorner: float
    cellsize: float
    nodata_value: float
    cells: np.ndarray

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.float64)
        if cells.size != self.ncols * self.nrows:
            raise RasterError(f"raster has {cells.size} cells, header implies {self.ncols * self.nrows}")
        if self.ncols < 1 or self.nrows < 1:
            raise RasterError("raster needs at least one row and column")
        if not self.cellsize > 0:
            raise RasterError(f"cellsize must be positive, got {self.cellsize}")
        cells = cells.reshape(self.nrows, self.ncols)
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @property
    def valid(self) -> np.ndarray:
        c = self.cells
        if math.isnan(self.nodata_value):
            return ~np.isnan(c)
        return (c != self.nodata_value) & ~np.isnan(c)

    def geometry(self) -> tuple:
        return (self.ncols, self.nrows, self.xllcorner, self.yllcorner, self.cellsize)

    def aligned_with(self, other: "GridRaster") -> bool:
        return self.geometry() == other.geometry()

    def like(self, cells, nodata_value=None) -> "GridRaster":
        return GridRaster(self.ncols, self.nrows, self.xllcorner, self.yllcorner, self.cellsize,
                          self.nodata_value if nodata_value is None else nodata_value, cells)

    def __eq__(self, other):
        if not isinstance(other, GridRaster):
            return NotImplemented
        same_nodata = self.nodata_value == other.nodata_value or (
            math.isnan(self.nodata_value) and math.isnan(other.nodata_value))
        return self.geometry() == other.geometry() and same_nodata and np.array_equal(
            self.cells, other.cells, equal_nan=True)

    __hash__ = None


def _num(tok: str, where: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise RasterError(f"non-numeric value {tok!r} at {where}") from None


def read_ascii_grid(text) -> GridRaster:
    """Parse an ESRI-ASCII-style grid. Header keys must appear in the fixed order."""
    if not isinstance(text, str):
        text = text.read()
    lines = text.splitlines()
    if len(lines) < len(HEADER_KEYS):
        raise RasterError(f"header needs {len(HEADER_KEYS)} lines, file has {len(lines)}")
    header = {}
    for i, key in enumerate(HEADER_KEYS):
        parts = lines[i].split()
        if len(parts) != 2 or parts[0].lower() != key.lower():
            raise RasterError(f"line {i + 1}: expected '{key} <value>', got {lines[i]!r}")
        header[key] = parts[1]
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
    except ValueError:
        raise RasterError("ncols and nrows must be integers") from None
    geo = {k: _num(header[k], f"header {k}") for k in ("xllcorner", "yllcorner", "cellsize", "NODATA_value")}

    expected = ncols * nrows
    values = []
    for lineno, line in enumerate(lines[len(HEADER_KEYS):], start=len(HEADER_KEYS) + 1):
        for col, tok in enumerate(line.split(), start=1):
            if len(values) == expected:
                raise RasterError(f"extra value {tok!r} at line {lineno}, token {col}: header declares {expected} cells")
            values.append(_num(tok, f"line {lineno}, token {col}"))
    if len(values) != expected:
        raise RasterError(f"header declares {expected} cells but body holds {len(values)} (ends at line {len(lines)})")
    return GridRaster(ncols, nrows, geo["xllcorner"], geo["yllcorner"], geo["cellsize"], geo["NODATA_value"],
                      np.array(values).reshape(nrows, ncols))


def write_ascii_grid(r: GridRaster, out=None) -> str | None:
    """Serialize with shortest round-trip decimals; returns text when ``out`` is None."""
    buf = io.StringIO() if out is None else out
    buf.write(f"ncols {r.ncols}\nnrows {r.nrows}\n")
    buf.write(f"xllcorner {float(r.xllcorner)!r}\nyllcorner {float(r.yllcorner)!r}\n")
    buf.write(f"cellsize {float(r.cellsize)!r}\nNODATA_value {float(r.nodata_value)!r}\n")
    for row in r.cells:
        buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue() if out is None else None


def load_grid(path) -> GridRaster:
    with open(path, encoding="utf-8") as fh:
        return read_ascii_grid(fh.read())


def save_grid(r: GridRaster, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_ascii_grid(r, fh)


# ---------------------------------------------------------------------------
# stacks and prediction


@dataclass(frozen=True)
class RasterStack:
    layers: dict
    district: GridRaster | None = None
    stratum: GridRaster | None = None

    def __post_init__(self):
        grids = list(self.layers.values()) + [g for g in (self.district, self.stratum) if g is not None]
        if not grids:
            raise RasterError("empty raster stack")
        ref = grids[0]
        for name, g in list(self.layers.items()) + [("district", self.district), ("stratum", self.stratum)]:
            if g is not None and not g.aligned_with(ref):
                raise RasterError(f"layer {name!r} is misaligned: {g.geometry()} vs {ref.geometry()}")

    @property
    def reference(self) -> GridRaster:
        return next(iter(self.layers.values()))

    def to_dir(self, path) -> list[str]:
        os.makedirs(path, exist_ok=True)
        written = []
        for name, g in [*self.layers.items(), ("district", self.district), ("stratum", self.stratum)]:
            if g is None:
                continue
            p = os.path.join(path, f"{name}.asc")
            save_grid(g, p)
            written.append(p)
        return written

    @classmethod
    def from_dir(cls, path, names=None) -> "RasterStack":
        """Load ``<name>.asc`` files; ``district.asc``/``stratum.asc`` are special."""
        if not os.path.isdir(path):
            raise RasterError(f"stack directory {path!r} does not exist")
        files = sorted(f for f in os.listdir(path) if f.endswith(".asc"))
        stems = [f[:-4] for f in files]
        wanted = names if names is not None else [s for s in stems if s not in ("district", "stratum", "truth")]
        layers = {}
        for n in wanted:
            if n not in stems:
                raise RasterError(f"missing feature layer {n!r} in {path}")
            layers[n] = load_grid(os.path.join(path, f"{n}.asc"))
        extra = {k: load_grid(os.path.join(path, f"{k}.asc")) for k in ("district", "stratum") if k in stems}
        return cls(layers, extra.get("district"), extra.get("stratum"))


def predict_raster(f: Forest, stack: RasterStack, threads: int = 1, nodata_value: float = DEFAULT_NODATA) -> GridRaster:
    """Per-cell forest probability; nodata in any feature layer gives nodata."""
    missing = [n for n in f.schema.names if n not in stack.layers]
    if missing:
        raise RasterError(f"stack lacks feature layers {missing}")
    ref = stack.layers[f.schema.names[0]]
    valid = np.ones((ref.nrows, ref.ncols), bool)
    for n in f.schema.names:
        valid &= stack.layers[n].valid
    X = np.column_stack([stack.layers[n].cells[valid] for n in f.schema.names])
    out = np.full((ref.nrows, ref.ncols), nodata_value)
    if X.shape[0]:
        out[valid] = f.predict_proba(X, threads=threads)
    return ref.like(out, nodata_value)


# ---------------------------------------------------------------------------
# zonation


@dataclass(frozen=True)
class RiskMap:
    probability: GridRaster
    classes: GridRaster
    cutoffs: tuple[float, float]


def quantile_cutoffs(p: GridRaster, quantiles=(1 / 3, 2 / 3)) -> tuple[float, float]:
    v = p.cells[p.valid]
    if v.size == 0:
        raise RasterError("no valid cells to derive quantile cutoffs from")
    c1, c2 = (float(q) for q in np.quantile(v, quantiles))
    if not c1 < c2:
        raise RasterError(f"quantile cutoffs collapse ({c1}, {c2}); probabilities are too concentrated")
    return c1, c2


def classify_risk(p: GridRaster, cutoffs=DEFAULT_CUTOFFS) -> RiskMap:
    """Class 1 below c1, 2 in [c1, c2), 3 from c2 up. Nodata passes through."""
    c1, c2 = (float(c) for c in cutoffs)
    if not 0 <= c1 < c2 <= 1:
        raise RasterError(f"cutoffs must satisfy 0 <= c1 < c2 <= 1, got ({c1}, {c2})")
    v = p.cells
    cls = np.where(v >= c2, 3.0, np.where(v >= c1, 2.0, 1.0))
    cls = np.where(p.valid, cls, p.nodata_value)
    return RiskMap(p, p.like(cls), (c1, c2))


@dataclass(frozen=True)
class DistrictAreaRow:
    district_id: str
    risk_class: int
    area_km2: float
    fraction: float


def _district_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def district_area_table(rm: RiskMap, districts: GridRaster) -> list[DistrictAreaRow]:
    """Area per (district, class) in km2. Districts with no valid cell are omitted."""
    if not districts.aligned_with(rm.classes):
        raise RasterError("district raster is misaligned with the risk map")
    valid = rm.classes.valid & districts.valid
    cell_km2 = rm.classes.cellsize ** 2 / 1e6
    ids = districts.cells[valid]
    classes = rm.classes.cells[valid].astype(np.int64)
    rows = []
    for d in np.unique(ids):
        in_d = classes[ids == d]
        total = in_d.size
        for c in RISK_CLASSES:
            k = int(np.sum(in_d == c))
            rows.append(DistrictAreaRow(_district_label(d), c, k * cell_km2, k / total))
    return rows


def write_area_table(rows, out) -> None:
    out.write("district_id,class,area_km2,fraction\n")
    for r in rows:
        out.write(f"{r.district_id},{r.risk_class},{r.area_km2!r},{r.fraction!r}\n")


# ---------------------------------------------------------------------------
# synthetic landscapes

DEFAULT_COEFFICIENTS = (
    ("ndvi", -0.8),
    ("evi", -0.6),
    ("vci", -0.6),
    ("lst", 1.0),
    ("elevation", -0.6),
    ("slope", 0.7),
    ("aspect", 0.0),
    ("soil_moisture", -0.7),
    ("soc", 1.2),
    ("tree_cover", 0.9),
    ("pop_density", 0.0),
)


@dataclass(frozen=True)
class SynthParams:
    """Generator settings. Zero coefficients mark pure-noise features."""

    size: int = 64
    smoothing: float = 2.0
    coefficients: tuple = DEFAULT_COEFFICIENTS
    intercept: float = 0.0
    seed: int = 0
    n_samples: int = 4000
    region_blocks: int = 2
    shift: float = 0.0
    years: tuple = (2024, 2025)
    cellsize: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple((str(n), float(b)) for n, b in self.coefficients))
        if self.size < 2:
            raise RasterError(f"grid size must be at least 2, got {self.size}")
        if not 2 <= self.n_samples <= self.size ** 2:
            raise RasterError(f"n_samples must lie in [2, {self.size ** 2}], got {self.n_samples}")
        if not 1 <= self.region_blocks <= self.size:
            raise RasterError(f"region_blocks must lie in [1, {self.size}]")
        if self.smoothing < 0:
            raise RasterError("smoothing radius must be non-negative")
        if not all(math.isfinite(b) for _, b in self.coefficients) or not math.isfinite(self.intercept):
            raise RasterError("coefficients must be finite")
        if sum(1 for _, b in self.coefficients if b == 0.0) < 2:
            raise RasterError("at least two zero-coefficient noise features are required")
        if not self.years:
            raise RasterError("at least one year is required")

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema.from_names(n for n, _ in self.coefficients)

    @property
    def noise_features(self) -> list[str]:
        return [n for n, b in self.coefficients if b == 0.0]


@dataclass(frozen=True)
class Landscape:
    stack: RasterStack
    truth: GridRaster
    samples: Dataset
    cells: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.stack, self.truth, self.samples))


def _block_index(size, blocks):
    edge = (np.arange(size) * blocks) // size
    return edge[:, None] * blocks + edge[None, :]


def synth_landscape(params: SynthParams = SynthParams()) -> Landscape:
    """Seeded landscape with a known logistic fire probability per cell.

    Features are Gaussian-smoothed white noise, standardised per layer.
    Region ``shift`` perturbs the coefficients independently per region.
    Unpack as ``stack, truth, samples = synth_landscape(...)``.
    """
    size = params.size
    seed = params.seed
    names = [n for n, _ in params.coefficients]
    beta = np.array([b for _, b in params.coefficients])

    rng = child_rng(seed, 1)
    fields = []
    for _ in names:
        z = rng.standard_normal((size, size))
        if params.smoothing > 0:
            z = gaussian_filter(z, params.smoothing, mode="wrap")
        sd = z.std()
        fields.append((z - z.mean()) / (sd if sd > 0 else 1.0))
    F = np.stack(fields, axis=-1)

    region = _block_index(size, params.region_blocks)
    district = _block_index(size, min(size, 2 * params.region_blocks)) + 1
    n_regions = params.region_blocks ** 2
    deltas = child_rng(seed, 3).standard_normal((n_regions, len(names)))
    cell_beta = beta[None, None, :] + params.shift * deltas[region]
    truth = expit(params.intercept + np.sum(F * cell_beta, axis=-1))

    strat_field = gaussian_filter(child_rng(seed, 2).standard_normal((size, size)), max(params.smoothing, 1.0), mode="wrap")
    nlcd = np.where(strat_field > 0, 42.0, 71.0)

    xll, yll, cs = 0.0, 0.0, params.cellsize

    def grid(cells):
        return GridRaster(size, size, xll, yll, cs, DEFAULT_NODATA, cells)

    stack = RasterStack({n: grid(F[:, :, j]) for j, n in enumerate(names)},
                        district=grid(district.astype(float)), stratum=grid(nlcd))
    truth_grid = grid(truth)

    cells = np.sort(child_rng(seed, 4).choice(size * size, params.n_samples, replace=False))
    rows, cols = np.divmod(cells, size)
    labels = (child_rng(seed, 5).random(cells.size) < truth[rows, cols]).astype(int)
    years = child_rng(seed, 6).choice(np.asarray(params.years, dtype=np.int64), cells.size)

    samples = tuple(
        Sample(
            id=f"c{r}_{c}",
            lon=-124.0 + 0.01 * c,
            lat=42.0 - 0.01 * r,
            region_id=f"R{region[r, c]}",
            district_id=str(district[r, c]),
            stratum=Stratum.from_nlcd(nlcd[r, c]),
            year=int(yr),
            label=int(lab),
            values=tuple(F[r, c, :]),
        )
        for r, c, lab, yr in zip(rows, cols, labels, years)
    )
    return Landscape(stack, truth_grid, Dataset(params.schema, samples), cells)


def truth_at(truth: GridRaster, samples: Dataset) -> np.ndarray:
    """Ground-truth probability at each sample's cell (ids are ``c<row>_<col>``)."""
    out = np.empty(len(samples))
    for i, s in enumerate(samples):
        r, c = s.id[1:].split("_")
        out[i] = truth.cells[int(r), int(c)]
    return out
