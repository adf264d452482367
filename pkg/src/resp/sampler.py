"""Hybrid Gibbs sampler for the marginalized RESP likelihood.

Each iteration draws ``beta`` and ``sigma2_w`` from their conjugate full
conditionals and then updates ``rho_w``, ``nugget_ratio``, ``sigma2_alpha``
and ``rho_alpha`` (in that order) with adaptive random-walk Metropolis steps
on unconstrained scales.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import linalg as sla
from scipy import special

from .data import Dataset
from .likelihood import (
    LikelihoodParts,
    LocalCorrelation,
    ModelState,
    NumericalError,
    Priors,
    cinv_matrix,
    residuals,
)
from .linalg import SPDFactor, SingularMatrixError, kron_whiten
from .reduced_rank import BasisBuilder, ReducedRankBasis

log = logging.getLogger(__name__)

MH_PARAMS = ("rho_w", "nugget_ratio", "sigma2_alpha", "rho_alpha")
SCALE_BOUNDS = (1e-6, 1e3)


@dataclass
class SamplerConfig:
    n_iter: int = 2000
    n_burn: int = 500
    target_accept: float = 0.44
    adapt_decay: float = 0.7
    thin: int = 1
    seed: int = 0
    init: str = "default"
    initial_scale: float = 0.1
    checkpoint_every: int = 500

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 0.5 < self.adapt_decay <= 1:
            raise ValueError("adapt_decay must lie in (0.5, 1]")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.init not in ("default", "random"):
            raise ValueError("init must be 'default' or 'random'")


# ---------------------------------------------------------------- transforms


def _bounds(param: str, priors: Priors):
    if param == "rho_w":
        return priors.unif_rho_w
    if param == "rho_alpha":
        return priors.unif_rho_alpha
    return None


def to_unconstrained(param: str, value: float, priors: Priors) -> float:
    b = _bounds(param, priors)
    if b is None:
        return float(np.log(value))
    lo, hi = b
    return float(np.log(value - lo) - np.log(hi - value))


def from_unconstrained(param: str, u: float, priors: Priors) -> float:
    b = _bounds(param, priors)
    if b is None:
        with np.errstate(over="ignore"):
            return float(np.exp(u))
    lo, hi = b
    return float(lo + (hi - lo) * special.expit(u))


def log_jacobian(param: str, value: float, priors: Priors) -> float:
    """``log |d value / d u|`` at ``value``."""
    b = _bounds(param, priors)
    with np.errstate(divide="ignore", invalid="ignore"):
        if b is None:
            return float(np.log(value))
        lo, hi = b
        return float(np.log(value - lo) + np.log(hi - value) - np.log(hi - lo))


def _log_ig(x: float, shape: float, rate: float) -> float:
    if not x > 0 or not np.isfinite(x):
        return -np.inf
    return shape * np.log(rate) - special.gammaln(shape) - (shape + 1) * np.log(x) - rate / x


def log_prior(param: str, value: float, priors: Priors) -> float:
    if param == "sigma2_alpha":
        return _log_ig(value, *priors.ig_alpha)
    if param == "nugget_ratio":
        return _log_ig(value, *priors.ig_eps)
    if param == "sigma2_w":
        return _log_ig(value, *priors.ig_w)
    lo, hi = _bounds(param, priors)
    return -np.log(hi - lo) if lo < value < hi else -np.inf


# ---------------------------------------------------------------- workspace


class Workspace:
    """Data plus cached factorizations shared across sampler steps."""

    def __init__(self, data: Dataset, builder: BasisBuilder, priors: Priors, nu_w: float = 0.5):
        self.data = data
        self.builder = builder
        self.priors = priors
        self.local = LocalCorrelation(data.response.lonlat, nu_w)
        self.X_stack = data.X.reshape(data.n_t * data.n_s, data.p)
        self.Y_stack = data.Y.T.ravel()
        self.beta_precision = priors.beta_precision(data.p)
        self._unit_memo: dict = {}
        self._cinv_memo: dict = {}

    def basis(self, state: ModelState) -> ReducedRankBasis:
        return self.builder.build_for(state)

    def unit_factor(self, state: ModelState) -> SPDFactor:
        key = (state.rho_w, state.nugget_ratio)
        f = self._unit_memo.get(key)
        if f is None:
            f = SPDFactor(self.local.unit(*key), check_symmetry=False)
            if len(self._unit_memo) > 4:
                self._unit_memo.clear()
            self._unit_memo[key] = f
        return f

    def cinv_factor(self, state: ModelState) -> SPDFactor:
        key = (state.rho_alpha, state.sigma2_alpha)
        f = self._cinv_memo.get(key)
        if f is None:
            f = SPDFactor(cinv_matrix(self.basis(state)), check_symmetry=False)
            if len(self._cinv_memo) > 4:
                self._cinv_memo.clear()
            self._cinv_memo[key] = f
        return f

    def parts(self, state: ModelState) -> LikelihoodParts:
        return LikelihoodParts(
            residuals(self.data, state.beta),
            self.unit_factor(state),
            self.cinv_factor(state),
            state.sigma2_w,
        )

    def loglik(self, state: ModelState) -> float:
        try:
            return self.parts(state).loglik()
        except (NumericalError, SingularMatrixError, ValueError, FloatingPointError):
            return -np.inf


# ---------------------------------------------------------------- conjugate steps


def beta_conditional(ws: Workspace, state: ModelState, remote: bool = True):
    """Mean and covariance of ``beta | rest``.

    With ``remote=False`` the time factor ``C`` is replaced by the identity,
    which is the local-only precision used for variance inflation factors.
    """
    fU = ws.unit_factor(state)
    if remote:
        fC = ws.cinv_factor(state)
    else:
        fC = SPDFactor(np.eye(ws.data.n_t), check_symmetry=False)
    s = np.sqrt(state.sigma2_w)
    Xw = kron_whiten(fC, fU, ws.X_stack) / s
    yw = kron_whiten(fC, fU, ws.Y_stack) / s
    P = ws.beta_precision + Xw.T @ Xw
    fP = SPDFactor(0.5 * (P + P.T))
    return fP.solve(Xw.T @ yw), fP


def update_beta(ws: Workspace, state: ModelState, rng) -> np.ndarray:
    mean, fP = beta_conditional(ws, state)
    z = rng.standard_normal(mean.size)
    return mean + sla.solve_triangular(fP.L.T, z, lower=False)


def sigma2w_conditional(ws: Workspace, state: ModelState):
    """Inverse-gamma (shape, rate) of ``sigma2_w | rest``."""
    a, b = ws.priors.ig_w
    q = ws.parts(state).unit_quadratic()
    n = ws.data.n_s * ws.data.n_t
    return a + 0.5 * n, b + 0.5 * q


def update_sigma2w(ws: Workspace, state: ModelState, rng) -> float:
    shape, rate = sigma2w_conditional(ws, state)
    return float(rate / rng.gamma(shape))


# ---------------------------------------------------------------- Metropolis


@dataclass
class StepResult:
    value: float
    accepted: bool
    scale: float
    log_target: float
    accept_prob: float


def adaptive_rw_step(
    u: float,
    log_target: Callable[[float], float],
    current: float,
    scale: float,
    iteration: int,
    rng,
    target_accept: float = 0.44,
    adapt_decay: float = 0.7,
    adapt: bool = True,
) -> StepResult:
    """One random-walk Metropolis step with Robbins-Monro variance adaptation.

    ``scale`` is the proposal variance. Both random numbers are always drawn
    so the stream stays aligned whatever the outcome.
    """
    z = rng.standard_normal()
    v = rng.uniform()
    proposal = u + np.sqrt(scale) * z
    try:
        lp = float(log_target(proposal))
    except (NumericalError, SingularMatrixError, FloatingPointError, OverflowError):
        lp = -np.inf
    if np.isfinite(lp) and np.isfinite(current):
        accept_prob = float(np.exp(min(0.0, lp - current)))
    elif np.isfinite(lp):
        accept_prob = 1.0
    else:
        accept_prob = 0.0
    accepted = v < accept_prob
    if adapt:
        gamma = iteration ** (-adapt_decay)
        scale = float(np.clip(scale * np.exp(gamma * (accept_prob - target_accept)), *SCALE_BOUNDS))
    if accepted:
        return StepResult(proposal, True, scale, lp, accept_prob)
    return StepResult(u, False, scale, current, accept_prob)


def mh_step(
    param: str,
    state: ModelState,
    ws: Workspace,
    scale: float,
    rng,
    iteration: int = 1,
    config: SamplerConfig | None = None,
    loglik: float | None = None,
    loglik_fn: Callable[[ModelState], float] | None = None,
    adapt: bool = True,
):
    """Adaptive Metropolis update of one covariance parameter.

    Returns ``(new_state, accepted, new_scale, new_loglik)``. ``loglik_fn``
    replaces the marginal likelihood (used to sample the prior alone).
    """
    if param not in MH_PARAMS:
        raise ValueError(f"unknown Metropolis parameter {param!r}")
    config = config or SamplerConfig()
    priors = ws.priors
    loglik_fn = loglik_fn or ws.loglik
    if loglik is None:
        loglik = loglik_fn(state)

    def log_post(value, ll):
        return ll + log_prior(param, value, priors) + log_jacobian(param, value, priors)

    cur_value = getattr(state, param)
    current = log_post(cur_value, loglik)
    cache = {}

    def target(u):
        value = from_unconstrained(param, u, priors)
        if not np.isfinite(log_prior(param, value, priors) + log_jacobian(param, value, priors)):
            return -np.inf
        proposed = state.replace(**{param: value})
        ll = loglik_fn(proposed)
        cache["ll"] = ll
        return log_post(value, ll)

    res = adaptive_rw_step(
        to_unconstrained(param, cur_value, priors),
        target,
        current,
        scale,
        iteration,
        rng,
        config.target_accept,
        config.adapt_decay,
        adapt,
    )
    if res.accepted:
        new_value = from_unconstrained(param, res.value, priors)
        return state.replace(**{param: new_value}), True, res.scale, cache["ll"]
    return state, False, res.scale, loglik


# ---------------------------------------------------------------- chains


@dataclass
class Chain:
    states: list
    logliks: np.ndarray
    iterations: np.ndarray
    accept_counts: dict
    proposal_scales: dict
    rng_seed: int
    n_burn: int = 0
    n_iter: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def acceptance_rates(self) -> dict:
        n = max(self.n_iter, 1)
        return {k: v / n for k, v in self.accept_counts.items()}

    def post_burn(self) -> list:
        return [s for s, i in zip(self.states, self.iterations) if i > self.n_burn]

    def column_names(self) -> list:
        p = self.states[0].beta.size
        return (
            ["iter"]
            + [f"beta_{j}" for j in range(p)]
            + ["sigma2_w", "nugget_ratio", "sigma2_alpha", "rho_w", "rho_alpha", "loglik"]
        )

    def table(self, post_burn: bool = False) -> np.ndarray:
        rows = []
        for s, i, ll in zip(self.states, self.iterations, self.logliks):
            if post_burn and i <= self.n_burn:
                continue
            rows.append(
                [i, *s.beta, s.sigma2_w, s.nugget_ratio, s.sigma2_alpha, s.rho_w, s.rho_alpha, ll]
            )
        return np.array(rows, dtype=float)

    def param(self, name: str, post_burn: bool = True) -> np.ndarray:
        cols = self.column_names()
        return self.table(post_burn)[:, cols.index(name)]

    def posterior_mean_state(self) -> ModelState:
        post = self.post_burn()
        nu_w, nu_a = post[0].nu_w, post[0].nu_alpha
        return ModelState(
            beta=np.mean([s.beta for s in post], axis=0),
            sigma2_w=float(np.mean([s.sigma2_w for s in post])),
            nugget_ratio=float(np.mean([s.nugget_ratio for s in post])),
            sigma2_alpha=float(np.mean([s.sigma2_alpha for s in post])),
            rho_w=float(np.mean([s.rho_w for s in post])),
            rho_alpha=float(np.mean([s.rho_alpha for s in post])),
            nu_w=nu_w,
            nu_alpha=nu_a,
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.column_names())
            for row in self.table():
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])

    def manifest(self) -> dict:
        return {
            "rng_seed": self.rng_seed,
            "n_iter": self.n_iter,
            "n_burn": self.n_burn,
            "kept": len(self.states),
            "acceptance_rates": self.acceptance_rates(),
            "proposal_scales": self.proposal_scales,
            "nu_w": self.states[0].nu_w if self.states else None,
            "nu_alpha": self.states[0].nu_alpha if self.states else None,
            **self.meta,
        }

    @classmethod
    def from_csv(cls, path, manifest: dict | None = None) -> "Chain":
        manifest = manifest or {}
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(x) for x in r] for r in reader if r])
        p = sum(h.startswith("beta_") for h in header)
        nu_w = manifest.get("nu_w", 0.5)
        nu_a = manifest.get("nu_alpha", 0.5)
        states = [
            ModelState(r[1 : 1 + p], *r[1 + p : 6 + p], nu_w=nu_w, nu_alpha=nu_a)
            for r in rows
        ]
        return cls(
            states=states,
            logliks=rows[:, -1],
            iterations=rows[:, 0].astype(int),
            accept_counts={},
            proposal_scales=manifest.get("proposal_scales", {}),
            rng_seed=manifest.get("rng_seed", 0),
            n_burn=manifest.get("n_burn", 0),
            n_iter=manifest.get("n_iter", len(states)),
        )


def initial_state(data: Dataset, priors: Priors, config: SamplerConfig, rng, nu_w=0.5, nu_alpha=0.5) -> ModelState:
    a_al, b_al = priors.ig_alpha
    values = {
        "sigma2_w": float(np.var(data.Y, ddof=1)),
        "nugget_ratio": 0.1,
        "sigma2_alpha": b_al / (a_al - 1.0) if a_al > 1 else b_al,
        "rho_w": 0.5 * sum(priors.unif_rho_w),
        "rho_alpha": 0.5 * sum(priors.unif_rho_alpha),
    }
    if config.init == "random":
        for name in values:
            values[name] *= rng.uniform(0.5, 1.5)
        for name in ("rho_w", "rho_alpha"):
            lo, hi = _bounds(name, priors)
            values[name] = float(np.clip(values[name], lo + 1e-6 * (hi - lo), hi - 1e-6 * (hi - lo)))
    return ModelState(np.zeros(data.p), nu_w=nu_w, nu_alpha=nu_alpha, **values)


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _save_checkpoint(path, chain: Chain, state: ModelState, scales: dict, rng, iteration: int):
    payload = {
        "iteration": iteration,
        "state": state.to_dict(),
        "scales": scales,
        "accept_counts": chain.accept_counts,
        "states": [s.to_dict() for s in chain.states],
        "logliks": [float(x) for x in chain.logliks],
        "iterations": [int(i) for i in chain.iterations],
        "rng": _rng_state(rng),
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)


def run_chain(
    data: Dataset,
    builder: BasisBuilder,
    priors: Priors,
    config: SamplerConfig,
    init: ModelState | None = None,
    nu_w: float = 0.5,
    nu_alpha: float = 0.5,
    chain_id: int = 0,
    checkpoint_path=None,
    resume: bool = False,
    loglik_fn: Callable[[ModelState], float] | None = None,
    initial_scales: dict | None = None,
) -> Chain:
    """Run one chain; deterministic given ``config.seed`` and ``chain_id``."""
    ws = Workspace(data, builder, priors, nu_w)
    rng = np.random.default_rng([config.seed, chain_id])
    state = init or initial_state(data, priors, config, rng, nu_w, nu_alpha)
    state.validate(priors)
    scales = dict(initial_scales or {p: config.initial_scale for p in MH_PARAMS})
    counts = {p: 0 for p in MH_PARAMS}
    chain = Chain([], np.array([]), np.array([], dtype=int), counts, scales, config.seed,
                  config.n_burn, config.n_iter)
    logliks, iters = [], []
    start = 1
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        ck = json.loads(Path(checkpoint_path).read_text())
        state = ModelState.from_dict(ck["state"])
        scales.update(ck["scales"])
        counts.update(ck["accept_counts"])
        chain.states = [ModelState.from_dict(s) for s in ck["states"]]
        logliks = list(ck["logliks"])
        iters = list(ck["iterations"])
        rng.bit_generator.state = ck["rng"]
        start = ck["iteration"] + 1
        log.info("resuming chain at iteration %d", start)

    llf = loglik_fn or ws.loglik
    for it in range(start, config.n_iter + 1):
        state = state.replace(beta=update_beta(ws, state, rng))
        state = state.replace(sigma2_w=update_sigma2w(ws, state, rng))
        ll = llf(state)
        for p in MH_PARAMS:
            state, acc, scales[p], ll = mh_step(
                p, state, ws, scales[p], rng, it, config, loglik=ll, loglik_fn=loglik_fn
            )
            counts[p] += int(acc)
        if it % config.thin == 0:
            chain.states.append(state)
            logliks.append(ll)
            iters.append(it)
        if checkpoint_path is not None and it % config.checkpoint_every == 0:
            chain.logliks = np.array(logliks)
            chain.iterations = np.array(iters, dtype=int)
            _save_checkpoint(checkpoint_path, chain, state, scales, rng, it)
    chain.logliks = np.array(logliks)
    chain.iterations = np.array(iters, dtype=int)
    chain.proposal_scales = scales
    chain.accept_counts = counts
    chain.meta = {"chain_id": chain_id, "config": asdict(config)}
    return chain


def hpd_interval(samples, level: float = 0.95):
    """Shortest interval containing ``level`` of the samples."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    m = int(np.ceil(level * n))
    if m >= n:
        return float(x[0]), float(x[-1])
    widths = x[m - 1 :] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])
