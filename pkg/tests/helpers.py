"""Small random instances shared by several test modules."""
from pathlib import Path

import numpy as np

from resp.likelihood import ModelState, simulate
from resp.reduced_rank import BasisBuilder

FIXTURES = Path(__file__).parent / "fixtures"

LOCAL_BOX = (-109.0, -102.0, 37.0, 41.0)
REMOTE_BOX = (-170.0, -120.0, -10.0, 30.0)


def random_geometry(rng, n_s, n_r, k):
    locs = np.c_[rng.uniform(*LOCAL_BOX[:2], n_s), rng.uniform(*LOCAL_BOX[2:], n_s)]
    remote = np.c_[rng.uniform(*REMOTE_BOX[:2], n_r), rng.uniform(*REMOTE_BOX[2:], n_r)]
    knots = remote[rng.choice(n_r, k, replace=False)] + rng.normal(0, 0.5, (k, 2))
    return locs, remote, knots


def random_state(rng, p=2):
    return ModelState(
        beta=rng.normal(size=p),
        sigma2_w=rng.uniform(0.3, 2.0),
        nugget_ratio=rng.uniform(0.05, 0.5),
        sigma2_alpha=rng.uniform(0.5, 3.0),
        rho_w=rng.uniform(50, 500),
        rho_alpha=rng.uniform(200, 1800),
    )


def tiny_instance(seed, n_s=3, n_t=4, k=2, n_r=6, design="intercept+field"):
    """Random small dataset with its generating state and basis."""
    rng = np.random.default_rng(seed)
    locs, remote, knots = random_geometry(rng, n_s, n_r, k)
    p = 2 if design == "intercept+field" else 1
    state = random_state(rng, p)
    sim = simulate(state, locs, remote, knots, n_t, design_rule=design, seed=seed, remote_range=2000.0)
    # non-trivial remote signal so C^-1 differs from I
    basis = BasisBuilder(remote, knots, sim.data.Z * n_r).build_for(state)
    data = sim.data.__class__(
        sim.data.response,
        sim.data.remote.with_values(sim.data.Z * n_r),
        sim.data.covariates,
    )
    return data, state, basis
