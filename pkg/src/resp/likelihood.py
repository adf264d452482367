"""RESP data model: mean assembly, marginal likelihood and simulation.

Stacked vectors are time-major: ``Y = [Y_{t1}; ...; Y_{tn}]`` with ``n_s``
entries per block. Knot coefficients are location-major:
``alpha = [alpha*(s_1); ...; alpha*(s_ns)]`` with ``k`` entries per block.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, GridSeries
from .kernels import MaternParams, as_lonlat, correlation_matrix
from .linalg import SPDFactor, kron_apply, kron_whiten
from .reduced_rank import ReducedRankBasis, build_basis, _round_sig

LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """A likelihood evaluation produced a non-finite value."""

    def __init__(self, message: str, factor: str):
        self.factor = factor
        super().__init__(f"{message} [{factor}]")


@dataclass(frozen=True)
class ModelState:
    beta: np.ndarray
    sigma2_w: float
    nugget_ratio: float
    sigma2_alpha: float
    rho_w: float
    rho_alpha: float
    nu_w: float = 0.5
    nu_alpha: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    def validate(self, priors: "Priors | None" = None) -> None:
        for name in ("sigma2_w", "nugget_ratio", "sigma2_alpha", "rho_w", "rho_alpha"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if priors is not None:
            for name, (lo, hi) in (
                ("rho_w", priors.unif_rho_w),
                ("rho_alpha", priors.unif_rho_alpha),
            ):
                v = getattr(self, name)
                if not lo < v < hi:
                    raise ValueError(f"{name}={v} outside prior support ({lo}, {hi})")

    @property
    def nugget(self) -> float:
        """Nugget variance ``sigma2_w * nugget_ratio``."""
        return self.sigma2_w * self.nugget_ratio

    def replace(self, **changes) -> "ModelState":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "sigma2_w": self.sigma2_w,
            "nugget_ratio": self.nugget_ratio,
            "sigma2_alpha": self.sigma2_alpha,
            "rho_w": self.rho_w,
            "rho_alpha": self.rho_alpha,
            "nu_w": self.nu_w,
            "nu_alpha": self.nu_alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        return cls(**d)


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters; inverse-gamma pairs are (shape, rate).

    ``ig_eps`` applies to the nugget ratio. ``beta_cov`` may be a scalar
    (times the identity) or a ``p x p`` matrix.
    """

    beta_cov: object = 10.0
    ig_w: tuple = (2.0, 1.0)
    ig_alpha: tuple = (6.0, 10.0)
    ig_eps: tuple = (2.0, 1.0)
    unif_rho_w: tuple = (1.0, 600.0)
    unif_rho_alpha: tuple = (1.0, 2000.0)

    def __post_init__(self):
        for name in ("ig_w", "ig_alpha", "ig_eps"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ValueError(f"{name} needs positive shape and rate")
        for name in ("unif_rho_w", "unif_rho_alpha"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} needs lower < upper")

    def beta_cov_matrix(self, p: int) -> np.ndarray:
        c = np.asarray(self.beta_cov, dtype=float)
        if c.ndim == 0:
            return float(c) * np.eye(p)
        if c.shape != (p, p):
            raise ValueError(f"beta_cov has shape {c.shape}, expected ({p}, {p})")
        return c

    def beta_precision(self, p: int) -> np.ndarray:
        return SPDFactor(self.beta_cov_matrix(p)).inverse()

    def to_dict(self) -> dict:
        bc = np.asarray(self.beta_cov)
        return {
            "beta_cov": bc.tolist(),
            "ig_w": list(self.ig_w),
            "ig_alpha": list(self.ig_alpha),
            "ig_eps": list(self.ig_eps),
            "unif_rho_w": list(self.unif_rho_w),
            "unif_rho_alpha": list(self.unif_rho_alpha),
        }


class LocalCorrelation:
    """Unit-scale local covariance ``Sigma / sigma2_w = R_w + nugget_ratio I``.

    ``R_w`` is cached per range (12 significant digits) so scale and nugget
    changes never re-evaluate the kernel.
    """

    def __init__(self, locs, nu: float = 0.5, cache_size: int = 8):
        self.locs = as_lonlat(locs)
        self.nu = nu
        self.cache_size = cache_size
        self._cache: OrderedDict = OrderedDict()

    @property
    def n(self) -> int:
        return len(self.locs)

    def correlation(self, rho: float) -> np.ndarray:
        key = _round_sig(rho)
        R = self._cache.get(key)
        if R is None:
            R = correlation_matrix(self.locs, rho=rho, nu=self.nu)
            self._cache[key] = R
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return R

    def unit(self, rho: float, nugget_ratio: float) -> np.ndarray:
        S = self.correlation(rho).copy()
        S[np.diag_indices_from(S)] += nugget_ratio
        return S

    def covariance(self, state: ModelState) -> np.ndarray:
        return state.sigma2_w * self.unit(state.rho_w, state.nugget_ratio)


def residuals(data: Dataset, beta) -> np.ndarray:
    """``E = Y - X beta`` as an ``n_s x n_t`` matrix (column t = e_t)."""
    Xb = np.einsum("tsp,p->st", data.X, np.asarray(beta, dtype=float))
    return data.Y - Xb


def assemble_mean(data: Dataset, beta, Zstar, alpha_star) -> np.ndarray:
    """Stacked mean ``X_t beta + (I kron z*_t^T) alpha`` over all times."""
    beta = np.asarray(beta, dtype=float)
    Zstar = np.asarray(Zstar, dtype=float)
    alpha_star = np.asarray(alpha_star, dtype=float).ravel()
    n_s, n_t, p = data.n_s, data.n_t, data.p
    k = Zstar.shape[0]
    if beta.shape != (p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({p},)")
    if Zstar.shape != (k, n_t):
        raise ValueError(f"Zstar has shape {Zstar.shape}, expected (k, {n_t})")
    if alpha_star.size != n_s * k:
        raise ValueError(f"alpha_star has {alpha_star.size} entries, expected {n_s * k}")
    local = np.einsum("tsp,p->ts", data.X, beta)
    # location-major (n_s blocks of n_t) -> time-major
    tele = kron_apply(np.eye(n_s), Zstar.T, alpha_star).reshape(n_s, n_t).T
    return (local + tele).ravel()


@dataclass
class LikelihoodParts:
    """Factorizations shared by the likelihood and the conjugate updates."""

    E: np.ndarray
    unit_factor: SPDFactor
    cinv_factor: SPDFactor
    sigma2_w: float
    whitened: np.ndarray = field(default=None, repr=False)

    @property
    def n_s(self) -> int:
        return self.E.shape[0]

    @property
    def n_t(self) -> int:
        return self.E.shape[1]

    def unit_quadratic(self) -> float:
        """``e^T [C kron (Sigma / sigma2_w)^{-1}] e``."""
        if self.whitened is None:
            self.whitened = kron_whiten(self.cinv_factor, self.unit_factor, self.E.T.ravel())
        with np.errstate(over="ignore", invalid="ignore"):
            return float(self.whitened @ self.whitened)

    def loglik(self) -> float:
        n_s, n_t = self.n_s, self.n_t
        logdet_sigma = n_s * np.log(self.sigma2_w) + self.unit_factor.logdet()
        logdet = n_s * self.cinv_factor.logdet() + n_t * logdet_sigma
        quad = self.unit_quadratic() / self.sigma2_w
        value = -0.5 * (n_s * n_t * LOG_2PI + logdet + quad)
        if not np.isfinite(value):
            if not np.isfinite(logdet_sigma):
                factor = "Sigma"
            elif not np.isfinite(logdet):
                factor = "C^-1"
            else:
                factor = "quadratic form"
            raise NumericalError("non-finite marginal log-likelihood", factor)
        return float(value)


def cinv_matrix(basis: ReducedRankBasis) -> np.ndarray:
    """``C^{-1} = I + Zstar^T Rstar Zstar``."""
    G = basis.remote_gram()
    G[np.diag_indices_from(G)] += 1.0
    return G


def likelihood_parts(
    data: Dataset,
    state: ModelState,
    basis: ReducedRankBasis,
    local: LocalCorrelation | None = None,
) -> LikelihoodParts:
    if local is None:
        local = LocalCorrelation(data.response.lonlat, state.nu_w)
    unit = SPDFactor(local.unit(state.rho_w, state.nugget_ratio), check_symmetry=False)
    cinv = SPDFactor(cinv_matrix(basis), check_symmetry=False)
    return LikelihoodParts(residuals(data, state.beta), unit, cinv, state.sigma2_w)


def marginal_loglik(
    data: Dataset,
    state: ModelState,
    basis: ReducedRankBasis,
    local: LocalCorrelation | None = None,
) -> float:
    """``log N(Y; X(1 kron beta), C^{-1} kron Sigma)`` via the two small factors."""
    if basis.Zstar.shape[1] != data.n_t:
        raise ValueError("basis induced covariates do not match the time index")
    return likelihood_parts(data, state, basis, local).loglik()


# ---------------------------------------------------------------- simulation


def _smooth_field(rng, locs, n_t, rho, nu=0.5):
    R = correlation_matrix(locs, rho=rho, nu=nu)
    L = SPDFactor(R).L
    return L @ rng.standard_normal((len(locs), n_t))


def _standardize_rows(v):
    v = v - v.mean(axis=1, keepdims=True)
    sd = v.std(axis=1, ddof=1, keepdims=True)
    return v / np.where(sd > 0, sd, 1.0)


def _design(rule, rng, locs, n_t):
    if callable(rule):
        return [np.asarray(c, dtype=float) for c in rule(rng, locs, n_t)]
    if rule == "intercept":
        return []
    if rule == "intercept+field":
        return [_standardize_rows(_smooth_field(rng, locs, n_t, rho=300.0))]
    raise ValueError(f"unknown design rule {rule!r}")


@dataclass
class Simulation:
    data: Dataset
    alpha_star: np.ndarray
    truth: ModelState
    knots: np.ndarray


def simulate(
    truth: ModelState,
    locs,
    remote_locs,
    knots,
    n_t: int,
    design_rule="intercept+field",
    seed: int = 0,
    remote_range: float = 1500.0,
    remote_field=None,
    covariates=None,
    times=None,
) -> Simulation:
    """Draw a synthetic dataset from the RESP data model.

    The remote field is a Matern GP (range ``remote_range``), centred and
    scaled per location and then multiplied by ``1/n_r``, matching the
    ingestion pipeline. ``remote_field`` and ``covariates`` override the
    random draws. ``truth.sigma2_alpha == 0`` switches the remote term off.
    """
    rng = np.random.default_rng(seed)
    locs = as_lonlat(locs)
    remote_locs = as_lonlat(remote_locs)
    knots = as_lonlat(knots)
    n_s, n_r = len(locs), len(remote_locs)
    if n_t < 2:
        raise ValueError("need at least two time points")
    if times is None:
        times = tuple(str(1981 + t) for t in range(n_t))

    if remote_field is None:
        Z = _standardize_rows(_smooth_field(rng, remote_locs, n_t, remote_range)) / n_r
    else:
        Z = np.asarray(remote_field, dtype=float)
    if covariates is None:
        cov_vals = _design(design_rule, rng, locs, n_t)
    else:
        cov_vals = [np.asarray(c, dtype=float) for c in covariates]

    loc_ids = tuple(f"s{i:03d}" for i in range(n_s))
    rem_ids = tuple(f"r{i:04d}" for i in range(n_r))
    data = Dataset(
        response=GridSeries(loc_ids, locs, times, np.zeros((n_s, n_t))),
        remote=GridSeries(rem_ids, remote_locs, times, Z),
        covariates=tuple(GridSeries(loc_ids, locs, times, c) for c in cov_vals),
    )
    if truth.beta.shape != (data.p,):
        raise ValueError(f"truth.beta must have {data.p} entries for this design")

    local = LocalCorrelation(locs, truth.nu_w)
    Sigma = local.covariance(truth)
    L_sigma = SPDFactor(Sigma).L
    k = len(knots)
    if truth.sigma2_alpha > 0:
        basis = build_basis(
            remote_locs, knots, Z, MaternParams(truth.sigma2_alpha, truth.rho_alpha, truth.nu_alpha)
        )
        xi = rng.standard_normal(n_s * k)
        alpha = kron_apply(L_sigma, basis.factor.L, xi)
        Zstar = basis.Zstar
    else:
        alpha = np.zeros(n_s * k)
        Zstar = np.zeros((k, n_t))

    mean = assemble_mean(data, truth.beta, Zstar, alpha).reshape(n_t, n_s).T
    L_w = SPDFactor(truth.sigma2_w * local.correlation(truth.rho_w)).L
    w = L_w @ rng.standard_normal((n_s, n_t))
    eps = np.sqrt(truth.nugget) * rng.standard_normal((n_s, n_t))
    Y = mean + w + eps
    data = replace(data, response=data.response.with_values(Y))
    return Simulation(data, alpha, truth, knots)
