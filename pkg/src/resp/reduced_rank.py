"""Predictive-process knots, induced remote covariates and the EOF basis."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    MaternParams,
    as_lonlat,
    build_remote_matrices,
)
from .linalg import SPDFactor


class EmptyKnotsError(ValueError):
    pass


class RankError(ValueError):
    pass


def place_knot_grid(bbox, target_k: int, mask=None) -> np.ndarray:
    """Regular lon/lat grid of at most ``target_k`` cell centres inside ``bbox``.

    ``bbox`` is ``(lon_min, lon_max, lat_min, lat_max)``. The grid shape is the
    factorization ``n_lon * n_lat <= target_k`` with the most points, ties
    broken toward cells that are closest to square on the ground. ``mask`` is
    an optional predicate ``mask(lon, lat) -> bool`` applied after gridding.
    """
    lon0, lon1, lat0, lat1 = map(float, bbox)
    if target_k < 1:
        raise ValueError("target_k must be >= 1")
    if not (lon1 > lon0 and lat1 > lat0):
        raise ValueError(f"degenerate bounding box {bbox}")
    width = (lon1 - lon0) * np.cos(np.radians(0.5 * (lat0 + lat1)))
    height = lat1 - lat0
    best = None
    for n_lat in range(1, target_k + 1):
        n_lon = target_k // n_lat
        if n_lon < 1:
            break
        aspect = abs(np.log((width / n_lon) / (height / n_lat)))
        key = (n_lon * n_lat, -aspect)
        if best is None or key > best[0]:
            best = (key, n_lon, n_lat)
    _, n_lon, n_lat = best
    lons = lon0 + (np.arange(n_lon) + 0.5) * (lon1 - lon0) / n_lon
    lats = lat0 + (np.arange(n_lat) + 0.5) * (lat1 - lat0) / n_lat
    grid = np.array([(lo, la) for la in lats for lo in lons])
    if mask is not None:
        keep = np.array([bool(mask(lo, la)) for lo, la in grid])
        grid = grid[keep]
    if len(grid) == 0:
        raise EmptyKnotsError("mask rejected every candidate knot")
    return grid


def induce_covariates(Z, Rstar, cstar, factor: SPDFactor | None = None) -> np.ndarray:
    """Induced covariates ``Zstar = Rstar^{-1} cstar^T Z`` (k x n_t)."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    cstar = np.asarray(cstar, dtype=float)
    if Z.shape[0] != cstar.shape[0]:
        raise ValueError(
            f"remote series has {Z.shape[0]} locations but cstar has {cstar.shape[0]}"
        )
    factor = factor or SPDFactor(Rstar)
    return factor.solve(cstar.T @ Z)


@dataclass
class ReducedRankBasis:
    """Knot Gram matrix, cross-covariance and induced covariates for one ``theta_alpha``."""

    knots: np.ndarray
    Rstar: np.ndarray
    cstar: np.ndarray
    Zstar: np.ndarray
    params: MaternParams
    _factor: SPDFactor | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.Rstar.shape[0]

    @property
    def factor(self) -> SPDFactor:
        if self._factor is None:
            self._factor = SPDFactor(self.Rstar)
        return self._factor

    def remote_gram(self) -> np.ndarray:
        """``Zstar^T Rstar Zstar`` (n_t x n_t)."""
        G = self.Zstar.T @ (self.Rstar @ self.Zstar)
        return 0.5 * (G + G.T)

    def kriging_weights(self) -> np.ndarray:
        """``h*(r) = Rstar^{-1} c*(r)`` for every remote site, as a k x n_r matrix."""
        return self.factor.solve(self.cstar.T)

    def induce(self, z) -> np.ndarray:
        return induce_covariates(z, self.Rstar, self.cstar, self.factor)


def build_basis(remote_locs, knots, Z, params: MaternParams) -> ReducedRankBasis:
    Rstar, cstar = build_remote_matrices(remote_locs, knots, params)
    factor = SPDFactor(Rstar)
    Zstar = induce_covariates(Z, Rstar, cstar, factor)
    return ReducedRankBasis(as_lonlat(knots), Rstar, cstar, Zstar, params, factor)


def _round_sig(x: float, digits: int = 12) -> float:
    return float(f"{x:.{digits - 1}e}")


class BasisBuilder:
    """Builds :class:`ReducedRankBasis` objects for varying ``(rho, sigma2)``.

    The induced covariates depend on the range only (the variance cancels in
    ``Rstar^{-1} cstar^T``), so unit-variance pieces are cached per range,
    keyed to 12 significant digits.
    """

    def __init__(self, remote_locs, knots, Z, nu: float = 0.5, cache_size: int = 32):
        self.remote_locs = as_lonlat(remote_locs)
        self.knots = as_lonlat(knots)
        self.Z = np.asarray(Z, dtype=float)
        self.nu = nu
        self.cache_size = cache_size
        self._cache: OrderedDict = OrderedDict()
        if self.Z.shape[0] != len(self.remote_locs):
            raise ValueError("remote series rows must match remote locations")
        if len(self.knots) > len(self.remote_locs):
            raise ValueError("more knots than remote locations")

    @property
    def k(self) -> int:
        return len(self.knots)

    def fresh(self) -> "BasisBuilder":
        """Same inputs, private cache (one per worker thread)."""
        return BasisBuilder(self.remote_locs, self.knots, self.Z, self.nu, self.cache_size)

    def _unit(self, rho: float):
        key = _round_sig(rho)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        R1, c1 = build_remote_matrices(
            self.remote_locs, self.knots, MaternParams(1.0, rho, self.nu)
        )
        f1 = SPDFactor(R1)
        Zs = induce_covariates(self.Z, R1, c1, f1)
        self._cache[key] = (R1, c1, f1, Zs)
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return self._cache[key]

    def build(self, rho: float, sigma2: float) -> ReducedRankBasis:
        R1, c1, f1, Zs = self._unit(rho)
        factor = _scaled_factor(f1, sigma2)
        return ReducedRankBasis(
            self.knots,
            sigma2 * R1,
            sigma2 * c1,
            Zs,
            MaternParams(sigma2, rho, self.nu),
            factor,
        )

    def build_for(self, state) -> ReducedRankBasis:
        return self.build(state.rho_alpha, state.sigma2_alpha)


def _scaled_factor(f: SPDFactor, s: float) -> SPDFactor:
    out = SPDFactor.__new__(SPDFactor)
    out.n = f.n
    out.jitter = s * f.jitter
    out.L = np.sqrt(s) * f.L
    return out


# ---------------------------------------------------------------- EOFs


@dataclass
class EofBasis:
    W: np.ndarray
    A: np.ndarray
    explained: np.ndarray

    @property
    def K(self) -> int:
        return self.W.shape[1]


def compute_eofs(Z, K: int, center_tol: float = 1e-8) -> EofBasis:
    """Leading ``K`` EOFs of a centred ``n_r x n_t`` field by SVD.

    Each pattern is signed so that its largest-magnitude entry is positive.
    Scores are raw projections ``A = W^T Z``.
    """
    Z = np.asarray(getattr(Z, "values", Z), dtype=float)
    n_r, n_t = Z.shape
    if K < 1 or K > min(n_r, n_t):
        raise RankError(f"K={K} must lie in [1, min(n_r, n_t)={min(n_r, n_t)}]")
    scale = max(np.max(np.abs(Z)), np.finfo(float).tiny)
    worst = np.max(np.abs(Z.mean(axis=1)))
    if worst > center_tol * scale:
        raise ValueError(
            f"remote series is not centred per location (max |mean| = {worst:.3g})"
        )
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    tol = s[0] * max(n_r, n_t) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if K > rank:
        raise RankError(f"K={K} exceeds the numerical rank {rank} of the remote field")
    W = U[:, :K].copy()
    lead = np.argmax(np.abs(W), axis=0)
    signs = np.sign(W[lead, np.arange(K)])
    W *= signs
    explained = s[:K] ** 2 / np.sum(s**2)
    return EofBasis(W, W.T @ Z, explained)


@dataclass
class ReparamMap:
    """Linear map ``T = W^T cstar Rstar^{-1}`` from knot to basis coefficients."""

    T: np.ndarray

    @property
    def shape(self):
        return self.T.shape


def reparam_map(W, basis: ReducedRankBasis) -> ReparamMap:
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != basis.cstar.shape[0]:
        raise ValueError(
            f"W has {W.shape[0]} rows but cstar has {basis.cstar.shape[0]}"
        )
    # T^T = Rstar^{-1} cstar^T W
    return ReparamMap(basis.factor.solve(basis.cstar.T @ W).T)
