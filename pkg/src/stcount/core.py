"""Panel containers, adjacency handling, offsets and CSV I/O.

Every model module works on the same three objects: a :class:`CountPanel`
of daily counts per region, an :class:`Adjacency` over the same regions and
zero or more :class:`CovariatePanel` surfaces aligned on the panel's day index.
All containers are frozen and their arrays are flagged read-only.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class StcountError(Exception):
    """Base class for modelling errors (CLI exit status 1)."""


class DataError(StcountError):
    """Malformed or inconsistent input data."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _as_date(d) -> dt.date:
    if isinstance(d, dt.datetime):
        return d.date()
    if isinstance(d, dt.date):
        return d
    return dt.date.fromisoformat(str(d))


@dataclass(frozen=True)
class CountPanel:
    """K regions by N consecutive days of non-negative integer counts."""

    regions: tuple
    dates: tuple
    values: np.ndarray

    def __post_init__(self):
        regions = tuple(str(r) for r in self.regions)
        dates = tuple(_as_date(d) for d in self.dates)
        raw = np.asarray(self.values)
        if raw.ndim != 2 or raw.shape != (len(regions), len(dates)):
            raise DataError(
                f"values shape {raw.shape} does not match {len(regions)} regions x {len(dates)} days"
            )
        if len(regions) < 1 or len(dates) < 2:
            raise DataError("a panel needs K >= 1 regions and N >= 2 days")
        if len(set(regions)) != len(regions):
            raise DataError("duplicate region ids")
        if not np.all(np.isfinite(raw)):
            raise DataError("counts must be finite")
        if np.any(raw < 0):
            raise DataError("negative count")
        if np.any(raw != np.round(raw)):
            raise DataError("counts must be integers")
        for a, b in zip(dates[:-1], dates[1:]):
            if (b - a).days != 1:
                raise DataError(f"non-consecutive dates: {a} -> {b}")
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", _frozen(raw, np.int64))

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def N(self) -> int:
        return len(self.dates)

    def slice_days(self, start: int, stop: int) -> "CountPanel":
        return CountPanel(self.regions, self.dates[start:stop], self.values[:, start:stop])

    def future_dates(self, h: int) -> list:
        last = self.dates[-1]
        return [last + dt.timedelta(days=i) for i in range(1, h + 1)]


@dataclass(frozen=True)
class Adjacency:
    """Symmetric binary neighbourhood matrix with zero diagonal."""

    regions: tuple
    w: np.ndarray

    def __post_init__(self):
        regions = tuple(str(r) for r in self.regions)
        w = np.asarray(self.w, dtype=float)
        K = len(regions)
        if w.shape != (K, K):
            raise DataError(f"adjacency shape {w.shape} does not match {K} regions")
        if not np.all((w == 0) | (w == 1)):
            raise DataError("adjacency entries must be 0 or 1")
        if np.any(np.diag(w) != 0):
            raise DataError("adjacency has a nonzero diagonal")
        if not np.array_equal(w, w.T):
            i, j = np.argwhere(w != w.T)[0]
            raise DataError(f"asymmetric adjacency: w[{regions[i]}][{regions[j]}] != w[{regions[j]}][{regions[i]}]")
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "w", _frozen(w))

    @property
    def K(self) -> int:
        return len(self.regions)

    def neighbors(self, region) -> set:
        i = self.regions.index(str(region))
        return {self.regions[j] for j in np.flatnonzero(self.w[i])}

    def row_sums(self) -> np.ndarray:
        return self.w.sum(axis=1)

    def check_regions(self, regions: Sequence) -> None:
        if tuple(str(r) for r in regions) != self.regions:
            raise DataError("adjacency region order does not match the panel")

    def permuted(self, order: Sequence[int]) -> "Adjacency":
        order = list(order)
        return Adjacency([self.regions[i] for i in order], self.w[np.ix_(order, order)])


def row_normalize(adj: Adjacency | np.ndarray) -> np.ndarray:
    """Neighbour weights normalised over each region's neighbours.

    Row ``k`` holds the weights ``w_qk / sum_q w_qk`` with which the lagged
    counts of regions ``q`` enter region ``k``, so ``row_normalize(adj) @ y``
    is the weighted neighbour sum for every region at once. Isolated regions
    keep an all-zero row.
    """
    w = np.asarray(adj.w if isinstance(adj, Adjacency) else adj, dtype=float)
    incoming = w.T
    s = incoming.sum(axis=1, keepdims=True)
    out = np.divide(incoming, s, out=np.zeros_like(incoming), where=s > 0)
    return out


@dataclass(frozen=True)
class OffsetSpec:
    populations: np.ndarray
    fractions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.populations, dtype=float)
        e = np.asarray(self.fractions, dtype=float)
        if p.shape != e.shape or p.ndim != 1:
            raise DataError("populations and fractions must be vectors of equal length")
        if np.any(p <= 0) or np.any(e <= 0):
            raise DataError("populations and fractions must be positive")
        object.__setattr__(self, "populations", _frozen(p))
        object.__setattr__(self, "fractions", _frozen(e))

    @property
    def log_fractions(self) -> np.ndarray:
        return np.log(self.fractions)


def population_fractions(populations) -> OffsetSpec:
    p = np.atleast_1d(np.asarray(populations, dtype=float))
    if p.size == 0 or np.any(~np.isfinite(p)) or np.any(p <= 0):
        raise DataError("non-positive population")
    return OffsetSpec(p, p / p.sum())


@dataclass(frozen=True)
class CovariatePanel:
    """Real-valued K x M covariate surface aligned with a panel's day index.

    Column ``t`` is the covariate value used on panel day ``t``. ``M`` may
    exceed the panel length: a lagged covariate is known ``lag`` days beyond
    the raw series, which is what makes short forecasts possible. The first
    ``first_valid`` columns are missing by construction (lag and smoothing)
    and are excluded from fitting windows; any other NaN is a data error.
    """

    name: str
    values: np.ndarray
    lag: int = 0
    first_valid: int = 0
    regions: tuple = ()
    start: dt.date | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise DataError("covariate values must be a K x M matrix")
        if self.lag < 0:
            raise DataError("covariate lag must be >= 0")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))

    @classmethod
    def from_raw(cls, name: str, raw, lag: int = 0, regions=(), start=None,
                 extend: bool = True) -> "CovariatePanel":
        """Shift a raw K x N surface forward by ``lag`` days.

        Leading columns that were NaN in ``raw`` (e.g. from trailing smoothing)
        stay flagged as missing after the shift.
        """
        raw = np.asarray(raw, dtype=float)
        if raw.ndim == 1:
            raw = raw[None, :]
        if lag < 0:
            raise DataError("covariate lag must be >= 0")
        K, N = raw.shape
        M = N + lag if extend else N
        out = np.full((K, M), np.nan)
        out[:, lag:] = raw[:, : M - lag]
        lead = 0
        while lead < N and np.all(np.isnan(raw[:, lead])):
            lead += 1
        return cls(name, out, lag=lag, first_valid=min(lag + lead, M), regions=regions, start=start)

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def check_defined(self, t0: int, t1: int, regions=None, dates=None) -> None:
        """Raise naming the first missing (region, day) cell in columns ``t0..t1-1``."""
        if t1 > self.length:
            raise DataError(
                f"covariate {self.name!r} is defined for {self.length} days, {t1} required"
            )
        block = self.values[:, t0:t1]
        bad = np.argwhere(np.isnan(block))
        if bad.size:
            k, j = bad[0]
            t = t0 + j
            reg = regions[k] if regions is not None else (self.regions[k] if self.regions else k)
            if dates is not None and t < len(dates):
                when = dates[t].isoformat()
            elif self.start is not None:
                when = (self.start + dt.timedelta(days=int(t))).isoformat()
            else:
                when = f"day {t}"
            raise DataError(f"missing covariate {self.name!r} at region {reg}, date {when}")


@dataclass(frozen=True)
class ForecastSet:
    """Per-region predictive summaries for a run of consecutive days."""

    regions: tuple
    dates: tuple
    mean: np.ndarray
    median: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray

    def __post_init__(self):
        for name in ("mean", "median", "lo95", "hi95"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "dates", tuple(_as_date(d) for d in self.dates))

    @property
    def horizon(self) -> int:
        return len(self.dates)


# -- CSV I/O -----------------------------------------------------------------

def fmt(x) -> str:
    """Stable text form for floats in CSV/JSON outputs."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _read_long(path, value_parser):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"region_id", "date", "value"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns region_id,date,value")
        cells = {}
        regions = []
        dates = set()
        for lineno, row in enumerate(reader, start=2):
            r = row["region_id"].strip()
            try:
                d = dt.date.fromisoformat(row["date"].strip())
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad date {row['date']!r}") from exc
            if (r, d) in cells:
                raise DataError(f"{path}:{lineno}: duplicate row for ({r}, {d})")
            cells[(r, d)] = value_parser(row["value"].strip(), path, lineno)
            if r not in regions:
                regions.append(r)
            dates.add(d)
    if not cells:
        raise DataError(f"{path}: no data rows")
    dates = sorted(dates)
    return regions, dates, cells


def _parse_count(s, path, lineno):
    try:
        v = float(s)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: non-numeric count {s!r}") from exc
    if v < 0:
        raise DataError(f"{path}:{lineno}: negative count")
    if v != round(v):
        raise DataError(f"{path}:{lineno}: non-integer count {s!r}")
    return int(v)


def _parse_real(s, path, lineno):
    if s == "" or s.lower() in ("na", "nan"):
        return math.nan
    try:
        return float(s)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: non-numeric value {s!r}") from exc


def load_count_panel(path) -> CountPanel:
    regions, dates, cells = _read_long(path, _parse_count)
    for a, b in zip(dates[:-1], dates[1:]):
        if (b - a).days != 1:
            raise DataError(f"{path}: non-consecutive dates: {a} -> {b}")
    values = np.zeros((len(regions), len(dates)), dtype=np.int64)
    for i, r in enumerate(regions):
        for j, d in enumerate(dates):
            try:
                values[i, j] = cells[(r, d)]
            except KeyError:
                raise DataError(f"{path}: missing cell ({r}, {d.isoformat()})") from None
    return CountPanel(regions, dates, values)


def write_count_panel(panel: CountPanel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "date", "value"])
        for i, r in enumerate(panel.regions):
            for j, d in enumerate(panel.dates):
                w.writerow([r, d.isoformat(), int(panel.values[i, j])])


def load_covariate_table(path, regions: Sequence | None = None):
    """Read a long-format real-valued surface.

    Returns ``(regions, dates, values)``; absent or blank cells become NaN.
    When ``regions`` is given the rows are reordered to it and any mismatch is
    an error.
    """
    found, dates, cells = _read_long(path, _parse_real)
    for a, b in zip(dates[:-1], dates[1:]):
        if (b - a).days != 1:
            raise DataError(f"{path}: non-consecutive dates: {a} -> {b}")
    if regions is not None:
        regions = [str(r) for r in regions]
        if sorted(regions) != sorted(found):
            raise DataError(f"{path}: region ids do not match the count panel")
        if regions != found:
            raise DataError(f"{path}: region order differs from the count panel")
    else:
        regions = found
    values = np.full((len(regions), len(dates)), np.nan)
    for i, r in enumerate(regions):
        for j, d in enumerate(dates):
            values[i, j] = cells.get((r, d), math.nan)
    return regions, dates, values


def write_covariate_table(regions, dates, values, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "date", "value"])
        for i, r in enumerate(regions):
            for j, d in enumerate(dates):
                w.writerow([r, _as_date(d).isoformat(), fmt(values[i][j])])


def load_adjacency(path) -> Adjacency:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if len(rows) < 2:
        raise DataError(f"{path}: empty adjacency matrix")
    header = [c.strip() for c in rows[0][1:]]
    names = []
    body = []
    for row in rows[1:]:
        names.append(row[0].strip())
        try:
            body.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric adjacency entry") from exc
    if names != header:
        raise DataError(f"{path}: row ids {names} differ from column ids {header}")
    if any(len(r) != len(header) for r in body):
        raise DataError(f"{path}: adjacency matrix is not square")
    return Adjacency(header, np.array(body))


def write_adjacency(adj: Adjacency, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(adj.regions))
        for r, row in zip(adj.regions, adj.w):
            w.writerow([r] + [int(v) for v in row])


def load_populations(path, regions: Sequence | None = None) -> np.ndarray:
    """Read ``region_id,population`` rows, ordered like ``regions``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"region_id", "population"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns region_id,population")
        pops = {}
        for row in reader:
            pops[row["region_id"].strip()] = float(row["population"])
    if regions is None:
        regions = list(pops)
    try:
        return np.array([pops[str(r)] for r in regions])
    except KeyError as exc:
        raise DataError(f"{path}: no population for region {exc.args[0]}") from None


def write_populations(regions, populations, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "population"])
        for r, p in zip(regions, populations):
            w.writerow([r, fmt(p)])


def write_forecast(fc: ForecastSet, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "date", "mean", "median", "lo95", "hi95"])
        for i, r in enumerate(fc.regions):
            for j, d in enumerate(fc.dates):
                w.writerow([r, d.isoformat(), fmt(fc.mean[i, j]), fmt(fc.median[i, j]),
                            fmt(fc.lo95[i, j]), fmt(fc.hi95[i, j])])


def read_forecast(path) -> ForecastSet:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    regions = list(dict.fromkeys(r["region"] for r in rows))
    dates = sorted({dt.date.fromisoformat(r["date"]) for r in rows})
    arrs = {k: np.full((len(regions), len(dates)), np.nan) for k in ("mean", "median", "lo95", "hi95")}
    for r in rows:
        i = regions.index(r["region"])
        j = dates.index(dt.date.fromisoformat(r["date"]))
        for k in arrs:
            arrs[k][i, j] = float(r[k])
    return ForecastSet(regions, dates, **arrs)


def write_matrix_csv(path, regions, dates, values) -> None:
    """Wide K x T table: one row per region, one column per date."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region"] + [_as_date(d).isoformat() for d in dates])
        for r, row in zip(regions, values):
            w.writerow([r] + [fmt(v) for v in row])
