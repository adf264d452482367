"""Variance inflation factors, tercile forecasts, skill scores and LOO validation."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AnomalyPipeline, Dataset
from .likelihood import LocalCorrelation, ModelState, Priors, cinv_matrix
from .linalg import SPDFactor, kron_whiten
from .posterior import alpha_conditional, predict
from .reduced_rank import BasisBuilder, ReducedRankBasis
from .sampler import SamplerConfig, run_chain

log = logging.getLogger(__name__)

CATEGORIES = (1, 2, 3)  # below, near, above average
_TIE_ORDER = (1, 0, 2)  # near average first, then lower index


# ---------------------------------------------------------------- VIFs


def _beta_cov_diags(data: Dataset, state: ModelState, basis: ReducedRankBasis, priors: Priors):
    local = LocalCorrelation(data.response.lonlat, state.nu_w)
    fS = SPDFactor(local.covariance(state), check_symmetry=False)
    X = data.X.reshape(data.n_t * data.n_s, data.p)
    prec0 = priors.beta_precision(data.p)
    out = []
    for cinv in (cinv_matrix(basis), np.eye(data.n_t)):
        Xw = kron_whiten(SPDFactor(cinv, check_symmetry=False), fS, X)
        P = prec0 + Xw.T @ Xw
        out.append(np.diag(SPDFactor(0.5 * (P + P.T)).inverse()))
    return out


def vif_local(i: int, data: Dataset, state: ModelState, basis: ReducedRankBasis, priors: Priors) -> float:
    """Posterior-variance ratio of ``beta_i`` with versus without remote covariates."""
    with_remote, without = _beta_cov_diags(data, state, basis, priors)
    return float(with_remote[i] / without[i])


def vif_local_all(data, state, basis, priors) -> np.ndarray:
    with_remote, without = _beta_cov_diags(data, state, basis, priors)
    return with_remote / without


def _remote_m(basis: ReducedRankBasis) -> np.ndarray:
    L_R = basis.factor.L
    B = L_R.T @ basis.Zstar
    Q = B @ B.T
    Q[np.diag_indices_from(Q)] += 1.0
    root = np.linalg.solve(SPDFactor(Q, check_symmetry=False).L, L_R.T).T
    return root @ root.T


def vif_remote_all(state: ModelState, basis: ReducedRankBasis) -> np.ndarray:
    M = _remote_m(basis)
    Zs = basis.Zstar
    denom = 1.0 / (1.0 / state.sigma2_alpha + np.einsum("it,it->i", Zs, Zs))
    return np.diag(M) / denom


def vif_remote(i: int, state: ModelState, basis: ReducedRankBasis) -> float:
    """Marginal posterior-variance ratio for the coefficients at knot ``i``."""
    if not 0 <= i < basis.k:
        raise IndexError(f"knot index {i} outside [0, {basis.k})")
    return float(vif_remote_all(state, basis)[i])


def vif_draws(chain, data: Dataset, builder: BasisBuilder, priors: Priors, G: int = 100):
    """Per-draw local and remote VIFs over a uniform stride of the chain."""
    post = chain.post_burn()
    idx = (np.arange(min(G, len(post))) * len(post)) // min(G, len(post))
    local, remote = [], []
    for j in idx:
        s = post[j]
        b = builder.build_for(s)
        local.append(vif_local_all(data, s, b, priors))
        remote.append(vif_remote_all(s, b))
    return np.array(local), np.array(remote)


# ---------------------------------------------------------------- terciles


@dataclass
class CategoricalForecast:
    probs: np.ndarray  # n_s x 3
    cutpoints: np.ndarray  # n_s x 2

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("category probabilities must sum to one")

    @property
    def point(self) -> np.ndarray:
        """Modal category per location; ties go to near average, then lower."""
        order = np.array(_TIE_ORDER)
        best = order[np.argmax(self.probs[:, order], axis=1)]
        return best + 1


def tercile_cutpoints(train) -> np.ndarray:
    """Per-location empirical 1/3 and 2/3 quantiles (linear interpolation, type 7)."""
    train = np.asarray(getattr(train, "values", train), dtype=float)
    if train.ndim == 1:
        train = train[None, :]
    if train.shape[1] < 3:
        raise ValueError("need at least three training values per location")
    return np.quantile(train, [1 / 3, 2 / 3], axis=1, method="linear").T


def categorize(values, cutpoints) -> np.ndarray:
    """Category 1 for ``v <= q1``, 2 for ``q1 < v <= q2``, else 3."""
    values = np.asarray(values, dtype=float)
    cutpoints = np.asarray(cutpoints, dtype=float)
    q1, q2 = cutpoints[:, 0], cutpoints[:, 1]
    if values.ndim == 2:
        q1, q2 = q1[:, None], q2[:, None]
    return np.where(values <= q1, 1, np.where(values <= q2, 2, 3))


def _frequencies(cats) -> np.ndarray:
    return np.stack([(cats == c).mean(axis=1) for c in CATEGORIES], axis=1)


def discretize(pred_draws, train) -> CategoricalForecast:
    cut = tercile_cutpoints(train)
    draws = np.asarray(pred_draws, dtype=float)
    if draws.shape[0] != cut.shape[0]:
        raise ValueError("predictive draws and training data cover different locations")
    return CategoricalForecast(_frequencies(categorize(draws, cut)), cut)


def climatology_forecast(train) -> CategoricalForecast:
    """Empirical tercile frequencies of the training years.

    A constant series has ``q1 == q2`` and every value lands in category 1.
    """
    train = np.asarray(getattr(train, "values", train), dtype=float)
    cut = tercile_cutpoints(train)
    return CategoricalForecast(_frequencies(categorize(train, cut)), cut)


def heidke(point_cats, obs_cats, p_ref: float = 1 / 3) -> float:
    point_cats = np.asarray(point_cats)
    obs_cats = np.asarray(obs_cats)
    if point_cats.size == 0:
        raise ValueError("no categories to score")
    if point_cats.shape != obs_cats.shape:
        raise ValueError("prediction and observation shapes differ")
    p_model = float(np.mean(point_cats == obs_cats))
    return (p_model - p_ref) / (1.0 - p_ref)


def rps(forecast, obs_cats) -> float:
    probs = np.asarray(getattr(forecast, "probs", forecast), dtype=float)
    obs_cats = np.asarray(obs_cats)
    if probs.ndim != 2 or probs.shape != (obs_cats.size, len(CATEGORIES)):
        raise ValueError(f"forecast shape {probs.shape} does not match {obs_cats.size} observations")
    F = np.cumsum(probs, axis=1)
    O = (obs_cats[:, None] <= np.array(CATEGORIES)[None, :]).astype(float)
    return float(np.mean(np.sum((F - O) ** 2, axis=1)))


# ---------------------------------------------------------------- LOO validation


@dataclass
class ModelConfig:
    knots: np.ndarray
    priors: Priors = field(default_factory=Priors)
    nu_w: float = 0.5
    nu_alpha: float = 0.5


@dataclass
class ValidateConfig:
    G: int = 500
    standardize: bool = True
    workers: int = 1
    models: tuple = ("RESP", "CLIM")


@dataclass
class SkillReport:
    year: str
    heidke: dict = field(default_factory=dict)
    rps: dict = field(default_factory=dict)
    rps_relative: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def models(self) -> list:
        return list(self.rps)


def resp_forecaster(train: Dataset, X_t0, z_t0, model: ModelConfig, sampler: SamplerConfig, G: int, seed: int):
    builder = BasisBuilder(train.remote.lonlat, model.knots, train.Z, model.nu_alpha)
    chain = run_chain(train, builder, model.priors, sampler, nu_w=model.nu_w, nu_alpha=model.nu_alpha)
    return predict(chain, train, builder, X_t0, z_t0, G, seed).draws


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(args):
    full, t, model, sampler, vcfg, forecaster = args
    year = full.time_index[t]
    train_idx = np.array([i for i in range(full.n_t) if i != t])
    try:
        data = AnomalyPipeline.fit(full, train_idx).transform(full) if vcfg.standardize else full
        train = data.select_times(train_idx)
        test = data.select_times([t])
        fold_sampler = replace(sampler, seed=_fold_seed(sampler.seed, t))
        draws = forecaster(train, test.X[0], test.Z[:, 0], model, fold_sampler, vcfg.G, fold_sampler.seed)
        fc = discretize(draws, train.Y)
        clim = climatology_forecast(train.Y)
        obs = categorize(test.Y[:, 0], fc.cutpoints)
        rep = SkillReport(year)
        for name, f in (("RESP", fc), ("CLIM", clim)):
            if name in vcfg.models:
                rep.heidke[name] = heidke(f.point, obs)
                rep.rps[name] = rps(f, obs)
        return rep
    except Exception as exc:  # per-year failures are recorded, the run continues
        log.warning("fold %s failed: %s", year, exc)
        return SkillReport(year, error=f"{type(exc).__name__}: {exc}")


def loo_validate(
    full: Dataset,
    model: ModelConfig,
    sampler: SamplerConfig,
    metrics: ValidateConfig | None = None,
    forecaster: Callable | None = None,
    years=None,
) -> list:
    """Leave-one-year-out validation of RESP against climatology.

    Each fold restandardizes on its training years, fits a chain, predicts
    the held-out year and scores tercile forecasts with training cutpoints.
    ``rps_relative`` is measured against the median climatology RPS.
    """
    metrics = metrics or ValidateConfig()
    if full.n_t < 4:
        raise ValueError("leave-one-out validation needs at least four time points")
    forecaster = forecaster or resp_forecaster
    folds = range(full.n_t) if years is None else [full.time_index.index(str(y)) for y in years]
    jobs = [(full, t, model, sampler, metrics, forecaster) for t in folds]
    if metrics.workers > 1:
        with ProcessPoolExecutor(max_workers=metrics.workers) as pool:
            reports = list(pool.map(_run_fold, jobs))
    else:
        reports = [_run_fold(j) for j in jobs]
    ok = [r for r in reports if r.error is None and "CLIM" in r.rps]
    if ok:
        ref = float(np.median([r.rps["CLIM"] for r in ok]))
        for r in ok:
            r.rps_relative = {m: v - ref for m, v in r.rps.items()}
    return reports


def write_skill_csv(path, reports) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "model", "heidke", "rps", "rps_relative"])
        for r in reports:
            if r.error is not None:
                continue
            for m in r.models:
                w.writerow([r.year, m, repr(r.heidke[m]), repr(r.rps[m]), repr(r.rps_relative.get(m, float("nan")))])


def read_skill_csv(path) -> list:
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "year": row["year"],
                    "model": row["model"],
                    "heidke": float(row["heidke"]),
                    "rps": float(row["rps"]),
                    "rps_relative": float(row["rps_relative"]),
                }
            )
    return rows


def skill_summary(reports) -> dict:
    """Medians and interquartile ranges per model and metric."""
    out = {"models": {}, "failed_years": [r.year for r in reports if r.error is not None]}
    models = sorted({m for r in reports for m in r.models})
    for m in models:
        entry = {}
        for metric in ("heidke", "rps", "rps_relative"):
            vals = np.array([getattr(r, metric)[m] for r in reports if m in getattr(r, metric)])
            if vals.size:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                entry[metric] = {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}
        entry["n_years"] = int(sum(m in r.rps for r in reports))
        out["models"][m] = entry
    return out


def write_skill_summary(path, reports) -> None:
    Path(path).write_text(json.dumps(skill_summary(reports), indent=2, sort_keys=True) + "\n")
