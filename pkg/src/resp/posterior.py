"""Composition sampling of knot teleconnection coefficients and prediction.

Draws of the ``n_s * k`` coefficient vector are never stored: they are folded
into mergeable running moments (one accumulator per worker) and summarized by
a normal approximation.
"""
from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg as sla
from scipy import stats

from .data import Dataset
from .likelihood import LocalCorrelation, ModelState, residuals
from .linalg import SPDFactor, kron_apply
from .reduced_rank import BasisBuilder, ReducedRankBasis, ReparamMap

COV_MAGIC = b"RESPCOV1"


# ---------------------------------------------------------------- streaming moments


@dataclass
class StreamingMoments:
    """Running count, mean and co-moment ``sum (x - mean)(x - mean)^T``."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "StreamingMoments":
        return cls(0, np.zeros(d), np.zeros((d, d)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def update(self, x) -> "StreamingMoments":
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.dim:
            raise ValueError(f"vector has {x.size} entries, accumulator has {self.dim}")
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += ((self.n - 1) / self.n) * np.outer(delta, delta)
        return self

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("covariance needs at least two observations")
        return self.m2 / (self.n - 1)


def moments_update(acc: StreamingMoments, x) -> StreamingMoments:
    """Absorb one vector into ``acc`` (in place) and return it."""
    return acc.update(x)


def moments_merge(a: StreamingMoments, b: StreamingMoments) -> StreamingMoments:
    """Pairwise combination of two accumulators into a new one."""
    if a.dim != b.dim:
        raise ValueError(f"cannot merge dimensions {a.dim} and {b.dim}")
    if a.n == 0:
        return StreamingMoments(b.n, b.mean.copy(), b.m2.copy())
    if b.n == 0:
        return StreamingMoments(a.n, a.mean.copy(), a.m2.copy())
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.n / n)
    m2 = a.m2 + b.m2 + np.outer(delta, delta) * (a.n * b.n / n)
    return StreamingMoments(n, mean, m2)


# ---------------------------------------------------------------- full conditional


@dataclass
class AlphaConditional:
    """Gaussian full conditional of the knot coefficients.

    Covariance is ``Sigma kron M`` with ``M = (Rstar^{-1} + Z* Z*^T)^{-1}``,
    held as the square roots ``L_sigma`` and ``root_M``.
    """

    mean: np.ndarray
    Sigma: np.ndarray
    M: np.ndarray
    L_sigma: np.ndarray
    root_M: np.ndarray

    @property
    def n_s(self) -> int:
        return self.Sigma.shape[0]

    @property
    def k(self) -> int:
        return self.M.shape[0]

    def sample(self, rng) -> np.ndarray:
        xi = rng.standard_normal(self.mean.size)
        return self.mean + kron_apply(self.L_sigma, self.root_M, xi)

    def dense_cov(self) -> np.ndarray:
        return np.kron(self.Sigma, self.M)


def alpha_conditional(
    data: Dataset,
    state: ModelState,
    basis: ReducedRankBasis,
    local: LocalCorrelation | None = None,
) -> AlphaConditional:
    if local is None:
        local = LocalCorrelation(data.response.lonlat, state.nu_w)
    Sigma = local.covariance(state)
    L_sigma = SPDFactor(Sigma, check_symmetry=False).L
    Zs = basis.Zstar
    # M = L_R (I + L_R^T Z Z^T L_R)^{-1} L_R^T keeps M PSD without inverting Rstar
    L_R = basis.factor.L
    B = L_R.T @ Zs
    Q = B @ B.T
    Q[np.diag_indices_from(Q)] += 1.0
    fQ = SPDFactor(Q, check_symmetry=False)
    root_M = sla.solve_triangular(fQ.L, L_R.T, lower=True).T
    M = root_M @ root_M.T
    E = residuals(data, state.beta)
    mean = (E @ Zs.T @ M).ravel()
    return AlphaConditional(mean, Sigma, M, L_sigma, root_M)


# ---------------------------------------------------------------- summaries


@dataclass
class AlphaPosterior:
    """Normal approximation to the coefficient posterior (location-major)."""

    mean: np.ndarray
    cov: np.ndarray
    location_ids: tuple
    component_ids: tuple
    n_draws: int = 0

    def __post_init__(self):
        d = len(self.location_ids) * len(self.component_ids)
        if self.mean.size != d or self.cov.shape != (d, d):
            raise ValueError("mean/cov dimensions do not match the id lists")

    @property
    def n_s(self) -> int:
        return len(self.location_ids)

    @property
    def k(self) -> int:
        return len(self.component_ids)

    def mean_matrix(self) -> np.ndarray:
        return self.mean.reshape(self.n_s, self.k)

    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def intervals(self, level: float = 0.95):
        z = stats.norm.ppf(0.5 + level / 2)
        sd = self.sd()
        return self.mean - z * sd, self.mean + z * sd

    def significant(self, level: float = 0.95) -> np.ndarray:
        """Central ``level`` interval excludes zero."""
        lo, hi = self.intervals(level)
        return (lo > 0) | (hi < 0)

    def write_csv(self, path, level: float = 0.95) -> None:
        sd = self.sd()
        sig = self.significant(level)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location_id", "knot_or_eof_id", "mean", "sd", "sig_flag"])
            i = 0
            for loc in self.location_ids:
                for comp in self.component_ids:
                    w.writerow([loc, comp, repr(float(self.mean[i])), repr(float(sd[i])), int(sig[i])])
                    i += 1

    def write_cov(self, path) -> None:
        write_cov_binary(path, self.cov)


def write_cov_binary(path, cov) -> None:
    cov = np.ascontiguousarray(cov, dtype="<f8")
    d = cov.shape[0]
    if cov.shape != (d, d):
        raise ValueError("covariance must be square")
    with Path(path).open("wb") as fh:
        fh.write(COV_MAGIC)
        fh.write(struct.pack("<II", d, 0))
        fh.write(cov.tobytes(order="C"))


def read_cov_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != COV_MAGIC:
        raise ValueError(f"{path}: not a RESPCOV1 file")
    d, _ = struct.unpack("<II", raw[8:16])
    body = np.frombuffer(raw[16:], dtype="<f8")
    if body.size != d * d:
        raise ValueError(f"{path}: expected {d * d} values, found {body.size}")
    return body.reshape(d, d).astype(float)


# ---------------------------------------------------------------- composition


def stride_indices(n_available: int, G: int) -> np.ndarray:
    if G < 1:
        raise ValueError("G must be >= 1")
    if G > n_available:
        raise ValueError(f"G={G} exceeds the {n_available} post-burn-in draws")
    return (np.arange(G) * n_available) // G


def _chunks(G: int, workers: int):
    workers = max(1, min(workers, G))
    edges = np.linspace(0, G, workers + 1).round().astype(int)
    return [range(edges[i], edges[i + 1]) for i in range(workers)]


@dataclass
class _DrawContext:
    data: Dataset
    builder: BasisBuilder
    local: LocalCorrelation = field(default=None)

    def __post_init__(self):
        if self.local is None:
            self.local = LocalCorrelation(self.data.response.lonlat)

    def conditional(self, state: ModelState) -> tuple:
        basis = self.builder.build_for(state)
        if self.local.nu != state.nu_w:
            self.local = LocalCorrelation(self.data.response.lonlat, state.nu_w)
        return alpha_conditional(self.data, state, basis, self.local), basis


def compose_alpha(
    chain,
    data: Dataset,
    builder: BasisBuilder,
    G: int,
    workers: int = 1,
    seed: int = 0,
    knot_ids=None,
    probe=None,
) -> AlphaPosterior:
    """Composition sample of the knot coefficients, summarized on the fly.

    Parameter draws are taken by uniform stride over the post-burn-in chain.
    Draw ``g`` always uses the RNG stream ``(seed, g)``, so the worker count
    only changes rounding. ``probe(worker, acc)``, if given, is called after
    each absorbed draw (used to audit memory).
    """
    post = chain.post_burn()
    idx = stride_indices(len(post), G)
    k = builder.k
    d = data.n_s * k

    def work(wid, draws):
        ctx = _DrawContext(data, builder.fresh())
        acc = StreamingMoments.empty(d)
        for g in draws:
            cond, _ = ctx.conditional(post[idx[g]])
            acc.update(cond.sample(np.random.default_rng([seed, g])))
            if probe is not None:
                probe(wid, acc)
        return acc

    chunks = _chunks(G, workers)
    if len(chunks) == 1:
        parts = [work(0, chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(work, range(len(chunks)), chunks))
    total = StreamingMoments.empty(d)
    for part in parts:
        total = moments_merge(total, part)
    if knot_ids is None:
        knot_ids = tuple(f"knot{j:03d}" for j in range(k))
    cov = total.covariance() if total.n >= 2 else np.zeros((d, d))
    return AlphaPosterior(total.mean, 0.5 * (cov + cov.T), data.response.ids, tuple(knot_ids), total.n)


def transform_to_eof(post: AlphaPosterior, rmap: ReparamMap, component_ids=None) -> AlphaPosterior:
    """Map knot coefficients to basis-function coefficients, ``(I kron T)``."""
    T = np.asarray(rmap.T, dtype=float)
    K, k = T.shape
    if k != post.k:
        raise ValueError(f"map expects {k} knots, posterior has {post.k}")
    n_s = post.n_s
    eye = np.eye(n_s)
    mean = kron_apply(eye, T, post.mean)
    half = kron_apply(eye, T, post.cov)  # (n_s K) x (n_s k)
    cov = kron_apply(eye, T, half.T)
    if component_ids is None:
        component_ids = tuple(f"eof{l + 1}" for l in range(K))
    return AlphaPosterior(mean, 0.5 * (cov + cov.T), post.location_ids, tuple(component_ids), post.n_draws)


# ---------------------------------------------------------------- prediction


@dataclass
class Prediction:
    draws: np.ndarray  # n_s x G
    location_ids: tuple

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=1)

    @property
    def sd(self) -> np.ndarray:
        if self.draws.shape[1] < 2:
            return np.zeros(self.draws.shape[0])
        return self.draws.std(axis=1, ddof=1)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location_id", "mean", "sd"])
            for loc, m, s in zip(self.location_ids, self.mean, self.sd):
                w.writerow([loc, repr(float(m)), repr(float(s))])


def predict(
    chain,
    data: Dataset,
    builder: BasisBuilder,
    X_t0,
    z_t0,
    G: int,
    seed: int = 0,
) -> Prediction:
    """Posterior predictive draws of the response field at a new time.

    ``X_t0`` is the ``n_s x p`` design and ``z_t0`` the remote field, both on
    the training scale.
    """
    if X_t0 is None or z_t0 is None:
        raise ValueError("prediction needs both local and remote covariates at t0")
    X_t0 = np.asarray(X_t0, dtype=float)
    z_t0 = np.asarray(z_t0, dtype=float).ravel()
    if X_t0.shape != (data.n_s, data.p):
        raise ValueError(f"X_t0 has shape {X_t0.shape}, expected ({data.n_s}, {data.p})")
    if z_t0.size != data.n_r:
        raise ValueError(f"z_t0 has {z_t0.size} entries, expected {data.n_r}")
    post = chain.post_burn()
    idx = stride_indices(len(post), G)
    ctx = _DrawContext(data, builder.fresh())
    draws = np.empty((data.n_s, G))
    for g in range(G):
        state = post[idx[g]]
        rng = np.random.default_rng([seed, g])
        cond, basis = ctx.conditional(state)
        alpha = cond.sample(rng).reshape(data.n_s, basis.k)
        zstar = basis.induce(z_t0)[:, 0]
        mean = X_t0 @ state.beta + alpha @ zstar
        draws[:, g] = mean + cond.L_sigma @ rng.standard_normal(data.n_s)
    return Prediction(draws, data.response.ids)
