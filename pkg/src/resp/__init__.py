"""Remote-effects spatial process (RESP) models for teleconnection analysis."""

__version__ = "0.1.0"

from .assess import (
    CategoricalForecast,
    SkillReport,
    climatology_forecast,
    discretize,
    heidke,
    loo_validate,
    rps,
    vif_local,
    vif_remote,
)
from .data import AnomalyPipeline, Dataset, GridSeries
from .kernels import Location, MaternParams, build_local_cov, build_remote_matrices, great_circle_km, matern
from .likelihood import ModelState, Priors, marginal_loglik, simulate
from .linalg import SPDFactor, kron_apply, kron_vec_right
from .posterior import (
    AlphaPosterior,
    StreamingMoments,
    alpha_conditional,
    compose_alpha,
    moments_merge,
    moments_update,
    predict,
    transform_to_eof,
)
from .reduced_rank import BasisBuilder, compute_eofs, induce_covariates, place_knot_grid, reparam_map
from .sampler import Chain, SamplerConfig, run_chain

__all__ = [
    "AlphaPosterior",
    "AnomalyPipeline",
    "BasisBuilder",
    "CategoricalForecast",
    "Chain",
    "Dataset",
    "GridSeries",
    "Location",
    "MaternParams",
    "ModelState",
    "Priors",
    "SPDFactor",
    "SamplerConfig",
    "SkillReport",
    "StreamingMoments",
    "alpha_conditional",
    "build_local_cov",
    "build_remote_matrices",
    "climatology_forecast",
    "compose_alpha",
    "compute_eofs",
    "discretize",
    "great_circle_km",
    "heidke",
    "induce_covariates",
    "kron_apply",
    "kron_vec_right",
    "loo_validate",
    "marginal_loglik",
    "matern",
    "moments_merge",
    "moments_update",
    "place_knot_grid",
    "predict",
    "reparam_map",
    "rps",
    "run_chain",
    "simulate",
    "transform_to_eof",
    "vif_local",
    "vif_remote",
]
