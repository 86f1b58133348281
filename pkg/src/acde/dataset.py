"""Observational datasets: loading, validation, covariate scaling and exposure blocks.

A :class:`Dataset` holds ``N`` observations of an outcome ``y``, a continuous
exposure ``z`` and a covariate matrix ``x`` of shape ``(N, d)``. Arrays are
made read-only on construction so a dataset can be shared freely between
threads.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ACDEWarning, DatasetTooSmallError, InfeasiblePartitionError, ParseError

EQUAL_COUNT = "equal-count"
EQUAL_WIDTH = "equal-width"
BLOCK_SCHEMES = (EQUAL_COUNT, EQUAL_WIDTH)


class Observation(NamedTuple):
    id: int
    y: float
    z: float
    x: tuple


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def covariate_scale(x):
    """Per-column sample standard deviation (``ddof=1``).

    Returns the scale vector and the list of zero-variance column indices,
    whose scale is replaced by 1 so that scaled distances fall back to raw
    differences on those columns.
    """
    x = np.asarray(x, dtype=float)
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    degenerate = [int(j) for j in np.flatnonzero(sd == 0)]
    sd = np.where(sd == 0, 1.0, sd)
    return sd, degenerate


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable sample of ``(y, z, x)`` observations.

    Use :meth:`from_arrays` or :func:`load_csv` rather than the raw
    constructor; they validate the data and compute ``covariate_scale``.
    """

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_scale: np.ndarray
    ids: np.ndarray
    warnings: tuple = field(default=())

    @classmethod
    def from_arrays(cls, y, z, x, ids=None):
        y = np.asarray(y, dtype=float).ravel()
        z = np.asarray(z, dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        if z.shape[0] != n or x.shape[0] != n:
            raise ValueError(f"length mismatch: y={n}, z={z.shape[0]}, x={x.shape[0]}")
        if x.shape[1] < 1:
            raise ValueError("at least one covariate is required")
        if n < 2:
            raise DatasetTooSmallError(f"need at least 2 observations, got {n}")
        for name, arr in (("y", y), ("z", z), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if ids is None:
            ids = np.arange(n)
        scale, degenerate = covariate_scale(x)
        notes = []
        for j in degenerate:
            msg = f"covariate x{j + 1} has zero variance; its scale is set to 1"
            warnings.warn(msg, ACDEWarning, stacklevel=2)
            notes.append(msg)
        return cls(
            y=_frozen(y),
            z=_frozen(z),
            x=_frozen(x),
            covariate_scale=_frozen(scale),
            ids=_frozen(ids, dtype=np.int64),
            warnings=tuple(notes),
        )

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def __len__(self):
        return self.n

    def observation(self, i):
        return Observation(int(self.ids[i]), float(self.y[i]), float(self.z[i]),
                           tuple(float(v) for v in self.x[i]))

    @property
    def observations(self):
        return [self.observation(i) for i in range(self.n)]

    def with_outcome(self, y):
        """Copy of the dataset with the outcome column replaced."""
        return Dataset(
            y=_frozen(np.asarray(y, dtype=float).ravel()),
            z=self.z, x=self.x, covariate_scale=self.covariate_scale,
            ids=self.ids, warnings=self.warnings,
        )


def load_csv(path):
    """Read a dataset with header ``y,z,x1..xd`` (and optionally ``id``).

    Every cell must be a finite decimal number; the first offending cell is
    reported with its 1-based data row number and column name.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        cols = _check_header(header)
        rows = []
        for rownum, raw in enumerate(reader, start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise ParseError(
                    f"row {rownum}: expected {len(header)} cells, got {len(raw)}", row=rownum)
            values = []
            for name, cell in zip(header, raw):
                cell = cell.strip()
                if not cell:
                    raise ParseError(f"row {rownum}, column {name!r}: empty cell",
                                     row=rownum, column=name)
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"row {rownum}, column {name!r}: not a number: {cell!r}",
                                     row=rownum, column=name) from None
                if not math.isfinite(v):
                    raise ParseError(f"row {rownum}, column {name!r}: non-finite value {cell!r}",
                                     row=rownum, column=name)
                values.append(v)
            rows.append(values)
    if len(rows) < 2:
        raise DatasetTooSmallError(f"{path}: need at least 2 data rows, got {len(rows)}")
    data = np.array(rows, dtype=float)
    ids = None
    if "id" in cols:
        id_col = data[:, cols["id"]]
        if not np.all(id_col == np.round(id_col)):
            raise ParseError(f"{path}: id column must hold integers", column="id")
        ids = id_col.astype(np.int64)
    xcols = [cols[f"x{j}"] for j in range(1, len(cols) - 2 - ("id" in cols) + 1)]
    return Dataset.from_arrays(data[:, cols["y"]], data[:, cols["z"]], data[:, xcols], ids=ids)


def _check_header(header):
    cols = {}
    for pos, name in enumerate(header):
        if name in cols:
            raise ParseError(f"duplicate column {name!r}", column=name)
        cols[name] = pos
    for required in ("y", "z", "x1"):
        if required not in cols:
            raise ParseError(f"missing required column {required!r}", column=required)
    extra = set(cols) - {"y", "z", "id"}
    d = len(extra)
    expected = {f"x{j}" for j in range(1, d + 1)}
    if extra != expected:
        bad = sorted(extra - expected)
        raise ParseError(f"unexpected columns {bad}; covariates must be named x1..x{d}",
                         column=bad[0] if bad else None)
    return cols


def write_csv(ds, path):
    """Write ``ds`` so that :func:`load_csv` reproduces it bit-for-bit."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "y", "z"] + [f"x{j}" for j in range(1, ds.d + 1)])
        for i in range(ds.n):
            w.writerow([int(ds.ids[i]), repr(float(ds.y[i])), repr(float(ds.z[i]))]
                       + [repr(float(v)) for v in ds.x[i]])


@dataclass(frozen=True)
class BlockPartition:
    """Exposure blocks ``[b0, b1], (b1, b2], ..., (b_{K-1}, bK]``.

    Values equal to an interior cut point belong to the lower block.
    """

    boundaries: tuple
    scheme: str

    @property
    def k(self):
        return len(self.boundaries) - 1

    def assign(self, z):
        """Block index (0-based) of each exposure value."""
        cuts = np.asarray(self.boundaries[1:-1], dtype=float)
        return np.searchsorted(cuts, np.asarray(z, dtype=float), side="left")

    def members(self, z):
        labels = self.assign(z)
        return [np.flatnonzero(labels == b) for b in range(self.k)]


def block_partition(ds, k, scheme=EQUAL_COUNT):
    """Split the exposure range of ``ds`` into ``k`` blocks.

    ``equal-count`` closes block ``j`` at the ``ceil(j*N/k)``-th smallest
    exposure (a run of tied values stays in the lower block) and cuts halfway
    to the next distinct value; ``equal-width`` cuts ``[min z, max z]``
    uniformly.
    """
    z = ds.z if isinstance(ds, Dataset) else np.asarray(ds, dtype=float)
    n = z.shape[0]
    if not 2 <= k <= n:
        raise ValueError(f"block count must satisfy 2 <= K <= N={n}, got {k}")
    lo, hi = float(z.min()), float(z.max())
    if scheme == EQUAL_WIDTH:
        if lo == hi:
            raise InfeasiblePartitionError("all exposures are equal; cannot cut equal-width blocks")
        cuts = [lo + (hi - lo) * j / k for j in range(1, k)]
        return BlockPartition((lo, *cuts, hi), EQUAL_WIDTH)
    if scheme != EQUAL_COUNT:
        raise ValueError(f"unknown block scheme {scheme!r}")
    distinct = np.unique(z)
    if k > distinct.shape[0]:
        raise InfeasiblePartitionError(
            f"{k} equal-count blocks need at least {k} distinct exposures, found {distinct.shape[0]}")
    zs = np.sort(z)
    cuts, last = [], None
    for j in range(1, k):
        v = float(zs[math.ceil(j * n / k) - 1])
        if last is not None and v <= last:
            # a tie run swallowed the previous cut: close this block one value later
            v = float(distinct[np.searchsorted(distinct, last, side="right")])
        if v >= hi:
            raise InfeasiblePartitionError(
                f"ties in z leave fewer than {k} nonempty equal-count blocks")
        above = float(distinct[np.searchsorted(distinct, v, side="right")])
        cuts.append(v + (above - v) / 2)
        last = v
    return BlockPartition((lo, *cuts, hi), EQUAL_COUNT)
