"""Space-time series containers, anomaly standardization and CSV exchange.

CSV layouts::

    locations: id,lon,lat
    series:    location_id,time,value
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .kernels import as_lonlat


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class GridSeries:
    """Values at fixed locations over an ordered time index (rows = locations)."""

    ids: tuple
    lonlat: np.ndarray
    times: tuple
    values: np.ndarray

    def __post_init__(self):
        lonlat = as_lonlat(self.lonlat)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "lonlat", lonlat)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "times", tuple(str(t) for t in self.times))
        if values.shape != (len(self.ids), len(self.times)):
            raise DataError(
                f"values shape {values.shape} != ({len(self.ids)}, {len(self.times)})"
            )
        if lonlat.shape[0] != len(self.ids):
            raise DataError("one lon/lat pair is required per location id")
        if not np.all(np.isfinite(values)):
            raise DataError("series contains missing or non-finite values")

    @property
    def n_loc(self) -> int:
        return len(self.ids)

    @property
    def n_t(self) -> int:
        return len(self.times)

    def select_times(self, idx) -> "GridSeries":
        idx = np.atleast_1d(np.asarray(idx))
        return replace(
            self,
            times=tuple(self.times[i] for i in idx),
            values=self.values[:, idx],
        )

    def with_values(self, values) -> "GridSeries":
        return replace(self, values=np.asarray(values, dtype=float))


@dataclass(frozen=True)
class Dataset:
    """Response, local covariate series and remote covariates on a shared time index.

    The design matrix for time ``t`` is ``[1, x_1(s, t), ..., x_m(s, t)]``
    (the intercept column only when ``intercept`` is set).
    """

    response: GridSeries
    remote: GridSeries
    covariates: tuple = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        times = self.response.times
        if self.remote.times != times:
            raise DataError(_time_diff("remote", times, self.remote.times))
        for i, cov in enumerate(self.covariates):
            if cov.times != times:
                raise DataError(_time_diff(f"covariate {i}", times, cov.times))
            if cov.ids != self.response.ids:
                raise DataError(f"covariate {i} locations differ from the response")
        if self.p == 0:
            raise DataError("design has no columns (no intercept, no covariates)")

    @property
    def n_s(self) -> int:
        return self.response.n_loc

    @property
    def n_t(self) -> int:
        return self.response.n_t

    @property
    def n_r(self) -> int:
        return self.remote.n_loc

    @property
    def p(self) -> int:
        return int(self.intercept) + len(self.covariates)

    @property
    def time_index(self) -> tuple:
        return self.response.times

    @property
    def Y(self) -> np.ndarray:
        """Responses, ``n_s x n_t``."""
        return self.response.values

    @property
    def Z(self) -> np.ndarray:
        """Remote covariates, ``n_r x n_t``."""
        return self.remote.values

    @cached_property
    def X(self) -> np.ndarray:
        """Design, ``n_t x n_s x p``."""
        cols = []
        if self.intercept:
            cols.append(np.ones((self.n_s, self.n_t)))
        cols.extend(c.values for c in self.covariates)
        return np.stack(cols, axis=-1).transpose(1, 0, 2).copy()

    def design_at(self, covariate_values) -> np.ndarray:
        """Design matrix ``n_s x p`` for a single time from covariate columns."""
        cols = [np.ones(self.n_s)] if self.intercept else []
        cols.extend(np.asarray(v, dtype=float) for v in covariate_values)
        return np.column_stack(cols)

    def select_times(self, idx) -> "Dataset":
        return replace(
            self,
            response=self.response.select_times(idx),
            remote=self.remote.select_times(idx),
            covariates=tuple(c.select_times(idx) for c in self.covariates),
        )


def _time_diff(name, want, got):
    missing = [t for t in want if t not in got]
    extra = [t for t in got if t not in want]
    msg = f"time index of {name} differs from the response"
    if missing:
        msg += f"; missing {missing[:5]}"
    if extra:
        msg += f"; unexpected {extra[:5]}"
    if not missing and not extra:
        msg += "; same labels in a different order"
    return msg


@dataclass
class AnomalyPipeline:
    """Per-location centering/scaling fitted on training times only."""

    train_times: tuple
    response: tuple = field(default=None)
    covariates: tuple = field(default=())
    remote: tuple = field(default=None)
    remote_scale: float = 1.0

    @classmethod
    def fit(cls, data: Dataset, train_idx=None) -> "AnomalyPipeline":
        if train_idx is None:
            train_idx = np.arange(data.n_t)
        train_idx = np.asarray(train_idx)
        if train_idx.size < 2:
            raise DataError("standardization needs at least two training times")

        def moments(series: GridSeries, name: str):
            v = series.values[:, train_idx]
            mu = v.mean(axis=1)
            sd = v.std(axis=1, ddof=1)
            bad = ~(sd > 0)
            if np.any(bad):
                loc = series.ids[int(np.argmax(bad))]
                raise DataError(f"{name} has zero variance at location {loc}")
            return mu, sd

        return cls(
            train_times=tuple(data.time_index[i] for i in train_idx),
            response=moments(data.response, "response"),
            covariates=tuple(
                moments(c, f"covariate {i}") for i, c in enumerate(data.covariates)
            ),
            remote=moments(data.remote, "remote series"),
            remote_scale=1.0 / data.n_r,
        )

    @staticmethod
    def _apply(series, mom, scale=1.0):
        mu, sd = mom
        return series.with_values(scale * (series.values - mu[:, None]) / sd[:, None])

    def transform(self, data: Dataset) -> Dataset:
        return replace(
            data,
            response=self._apply(data.response, self.response),
            remote=self._apply(data.remote, self.remote, self.remote_scale),
            covariates=tuple(
                self._apply(c, m) for c, m in zip(data.covariates, self.covariates)
            ),
        )

    def transform_remote(self, z) -> np.ndarray:
        mu, sd = self.remote
        return self.remote_scale * (np.asarray(z, dtype=float) - mu) / sd

    def transform_covariates(self, cols) -> list:
        return [(np.asarray(v) - m[0]) / m[1] for v, m in zip(cols, self.covariates)]

    def transform_response(self, y) -> np.ndarray:
        mu, sd = self.response
        return (np.asarray(y, dtype=float) - mu) / sd

    def to_dict(self) -> dict:
        def m(x):
            return None if x is None else {"mean": x[0].tolist(), "sd": x[1].tolist()}

        return {
            "train_times": list(self.train_times),
            "response": m(self.response),
            "covariates": [m(c) for c in self.covariates],
            "remote": m(self.remote),
            "remote_scale": self.remote_scale,
        }


def check_centered(data: Dataset, tol: float = 1e-8) -> None:
    """Warn if a passthrough response is not per-location centred."""
    means = np.abs(data.Y.mean(axis=1))
    if means.size and means.max() > tol:
        warnings.warn(
            f"response is not centred (max |mean| = {means.max():.3g}); "
            "pass standardize to remove location means",
            RuntimeWarning,
            stacklevel=2,
        )


# ---------------------------------------------------------------- CSV I/O


def read_locations(path) -> tuple:
    path = Path(path)
    ids, ll = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "lon", "lat"]:
            raise DataError(f"{path}:1: expected header id,lon,lat")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ids.append(row[0].strip())
                ll.append((float(row[1]), float(row[2])))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate location ids")
    return tuple(ids), np.array(ll, dtype=float).reshape(-1, 2)


def write_locations(path, ids, lonlat) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lon", "lat"])
        for i, (lon, lat) in zip(ids, np.asarray(lonlat)):
            w.writerow([i, repr(float(lon)), repr(float(lat))])


def read_series(path, ids, lonlat) -> GridSeries:
    """Read a long-format series and pivot to locations x times.

    Times keep their order of first appearance in the file.
    """
    path = Path(path)
    index = {i: k for k, i in enumerate(ids)}
    times: dict = {}
    cells: dict = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != [
            "location_id",
            "time",
            "value",
        ]:
            raise DataError(f"{path}:1: expected header location_id,time,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                loc, t, val = row[0].strip(), row[1].strip(), float(row[2])
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if loc not in index:
                raise DataError(f"{path}:{lineno}: unknown location id {loc!r}")
            if (loc, t) in cells:
                raise DataError(f"{path}:{lineno}: duplicate cell ({loc}, {t})")
            times.setdefault(t, len(times))
            cells[(loc, t)] = val
    values = np.full((len(ids), len(times)), np.nan)
    for (loc, t), val in cells.items():
        values[index[loc], times[t]] = val
    if np.isnan(values).any():
        i, j = np.argwhere(np.isnan(values))[0]
        raise DataError(
            f"{path}: missing value for location {ids[i]!r} at time {list(times)[j]!r}"
        )
    return GridSeries(ids, lonlat, tuple(times), values)


def write_series(path, series: GridSeries) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id", "time", "value"])
        for i, loc in enumerate(series.ids):
            for j, t in enumerate(series.times):
                w.writerow([loc, t, repr(float(series.values[i, j]))])
