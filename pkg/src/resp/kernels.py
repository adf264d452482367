"""Great-circle distances and Matern covariances on the sphere."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

EARTH_RADIUS_KM = 6371.0


class NearSingularError(ValueError):
    """Raised when a covariance is singular by construction (duplicate sites)."""


@dataclass(frozen=True)
class Location:
    lon: float
    lat: float

    def __post_init__(self):
        if not (np.isfinite(self.lon) and np.isfinite(self.lat)):
            raise ValueError(f"non-finite location ({self.lon}, {self.lat})")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    rho: float
    nu: float = 0.5

    def __post_init__(self):
        for name in ("sigma2", "rho", "nu"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"MaternParams.{name} must be positive, got {v}")


@dataclass(frozen=True)
class LocalCovParams:
    matern: MaternParams
    nugget_sigma2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.nugget_sigma2) and self.nugget_sigma2 >= 0):
            raise ValueError("nugget variance must be >= 0")


def as_lonlat(locs) -> np.ndarray:
    """Coerce a :class:`Location`, a list of them, a pair or an ``(n, 2)`` array."""
    if isinstance(locs, Location):
        return np.array([[locs.lon, locs.lat]])
    if len(locs) and isinstance(locs[0], Location):
        return np.array([[p.lon, p.lat] for p in locs], dtype=float)
    arr = np.asarray(locs, dtype=float)
    if arr.shape == (2,):
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"locations must have shape (n, 2), got {arr.shape}")
    return arr


def great_circle_km(u, v) -> float:
    """Haversine distance in km between two locations."""
    a = as_lonlat(u)
    b = as_lonlat(v)
    return float(distance_matrix(a, b)[0, 0])


def distance_matrix(a, b=None) -> np.ndarray:
    """Pairwise haversine distances (km) between rows of ``a`` and ``b``."""
    a = as_lonlat(a)
    b = a if b is None else as_lonlat(b)
    lon1, lat1 = np.radians(a[:, 0])[:, None], np.radians(a[:, 1])[:, None]
    lon2, lat2 = np.radians(b[:, 0])[None, :], np.radians(b[:, 1])[None, :]
    h = (
        np.sin((lat2 - lat1) / 2.0) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    )
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))


def matern(d, p: MaternParams):
    """Matern covariance at distance(s) ``d`` (km).

    Evaluated in log space with the exponentially scaled Bessel function so
    that distant pairs underflow cleanly to zero. ``d == 0`` returns
    ``p.sigma2`` exactly.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    x = d / p.rho
    out = np.full(x.shape, p.sigma2, dtype=float)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(divide="ignore"):
            log_k = (
                np.log(p.sigma2)
                - (p.nu - 1.0) * np.log(2.0)
                - special.gammaln(p.nu)
                + p.nu * np.log(xp)
                + np.log(special.kve(p.nu, xp))
                - xp
            )
        out[pos] = np.minimum(np.exp(log_k), p.sigma2)
    return out if out.ndim else float(out)


def correlation_matrix(a, b=None, rho: float = 1.0, nu: float = 0.5) -> np.ndarray:
    """Unit-variance Matern correlation between two location sets."""
    return matern(distance_matrix(a, b), MaternParams(1.0, rho, nu))


def _has_duplicates(ll: np.ndarray) -> bool:
    return len(np.unique(ll, axis=0)) < len(ll)


def build_local_cov(locs, p: LocalCovParams) -> np.ndarray:
    """Local covariance: Matern plus nugget on the diagonal."""
    ll = as_lonlat(locs)
    if len(ll) < 1:
        raise ValueError("need at least one location")
    if p.nugget_sigma2 == 0 and _has_duplicates(ll):
        warnings.warn(
            "duplicate locations with zero nugget: covariance is singular",
            RuntimeWarning,
            stacklevel=2,
        )
    S = matern(distance_matrix(ll), p.matern)
    S[np.diag_indices_from(S)] += p.nugget_sigma2
    return S


def build_remote_matrices(remote_locs, knots, p: MaternParams):
    """Knot Gram matrix ``Rstar`` (k x k) and cross-covariance ``cstar`` (n_r x k).

    Both use the remote kernel alone; the local scale enters the prior on the
    coefficients separately.
    """
    rl = as_lonlat(remote_locs)
    kn = as_lonlat(knots)
    if _has_duplicates(kn):
        raise NearSingularError("duplicate knot locations make Rstar singular")
    Rstar = matern(distance_matrix(kn), p)
    cstar = matern(distance_matrix(rl, kn), p)
    return Rstar, cstar
