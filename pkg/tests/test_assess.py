from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_geometry, tiny_instance
from oracles import dense_beta_conditional
from resp.assess import (
    CategoricalForecast,
    ModelConfig,
    ValidateConfig,
    _fold_seed,
    categorize,
    climatology_forecast,
    discretize,
    heidke,
    loo_validate,
    read_skill_csv,
    rps,
    skill_summary,
    tercile_cutpoints,
    vif_draws,
    vif_local,
    vif_local_all,
    vif_remote,
    vif_remote_all,
    write_skill_csv,
)
from resp.kernels import MaternParams
from resp.likelihood import ModelState, Priors, simulate
from resp.reduced_rank import BasisBuilder, ReducedRankBasis
from resp.sampler import SamplerConfig, run_chain


def synthetic_basis(Zstar, sigma2=2.0):
    k = Zstar.shape[0]
    return ReducedRankBasis(np.zeros((k, 2)), sigma2 * np.eye(k), np.zeros((1, k)), Zstar, MaternParams(sigma2, 500.0))


# ---------------------------------------------------------------- local VIF


def test_local_vif_one_without_remote(tiny):
    data, state, basis = tiny
    Z0 = np.zeros_like(data.Z)
    b0 = BasisBuilder(data.remote.lonlat, basis.knots, Z0).build_for(state)
    data0 = replace(data, remote=data.remote.with_values(Z0))
    np.testing.assert_array_equal(vif_local_all(data0, state, b0, Priors()), 1.0)


def test_local_vif_matches_dense_assembly():
    # remote signal aligned with the field covariate
    data, state, basis = tiny_instance(14, n_s=3, n_t=5, k=2)
    Z = np.repeat(data.X[:, 0, 1][None, :], data.n_r, axis=0) * 20
    data = replace(data, remote=data.remote.with_values(Z))
    basis = BasisBuilder(data.remote.lonlat, basis.knots, Z).build_for(state)
    priors = Priors()
    _, with_remote = dense_beta_conditional(data, state, basis, priors)
    _, without = dense_beta_conditional(data, state, basis, priors, remote=False)
    for i in range(data.p):
        expected = with_remote[i, i] / without[i, i]
        assert vif_local(i, data, state, basis, priors) == pytest.approx(expected, abs=1e-8)
    assert vif_local(1, data, state, basis, priors) > 1.01


@given(st.integers(0, 10_000))
def test_local_vif_at_least_one(seed):
    data, state, basis = tiny_instance(seed)
    assert np.all(vif_local_all(data, state, basis, Priors()) >= 1 - 1e-10)


# ---------------------------------------------------------------- remote VIF


def test_remote_vif_single_knot():
    data, state, basis = tiny_instance(15, k=1)
    assert vif_remote(0, state, basis) == pytest.approx(1.0, abs=1e-12)


def test_remote_vif_orthogonal_rows():
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 3)))
    Zs = (Q * [1.0, 3.0, 0.2]).T
    state = ModelState([0.0], 1.0, 0.1, 2.0, 100.0, 500.0)
    np.testing.assert_allclose(vif_remote_all(state, synthetic_basis(Zs)), 1.0, atol=1e-10)


def test_remote_vif_collinear_rows():
    rng = np.random.default_rng(1)
    z = rng.normal(size=8) * 3
    Zs = np.vstack([z, z + rng.normal(0, 1e-3, 8), rng.normal(size=8)])
    state = ModelState([0.0], 1.0, 0.1, 2.0, 100.0, 500.0)
    vifs = vif_remote_all(state, synthetic_basis(Zs))
    assert vifs[0] > 2 and vifs[1] > 2
    with pytest.raises(IndexError):
        vif_remote(3, state, synthetic_basis(Zs))


def test_vif_draws_shapes():
    data, state, basis = tiny_instance(16, n_s=3, n_t=5, k=2)
    builder = BasisBuilder(data.remote.lonlat, basis.knots, data.Z)
    chain = run_chain(data, builder, Priors(), SamplerConfig(n_iter=30, n_burn=10))
    local, remote = vif_draws(chain, data, builder, Priors(), G=7)
    assert local.shape == (7, data.p) and remote.shape == (7, 2)


# ---------------------------------------------------------------- terciles


def test_cutpoints_type7():
    cut = tercile_cutpoints(np.arange(1.0, 11.0))
    np.testing.assert_allclose(cut, [[1 + 9 / 3, 1 + 18 / 3]])
    with pytest.raises(ValueError):
        tercile_cutpoints(np.array([[1.0, 2.0]]))


def test_discretize_point_mass():
    train = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    fc = discretize(np.full((1, 50), -10.0), train)
    np.testing.assert_array_equal(fc.probs, [[1, 0, 0]])
    assert fc.point.tolist() == [1]


def test_discretize_self_is_uniform():
    train = np.random.default_rng(2).normal(size=(4, 30))
    fc = discretize(train, train)
    np.testing.assert_allclose(fc.probs, 1 / 3, atol=1 / 30 + 1e-12)


def test_discretize_tie_goes_to_near_average():
    train = np.array([[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]])
    lo, hi = tercile_cutpoints(train)[0]
    fc = discretize(np.array([[lo - 1, (lo + hi) / 2, hi + 1]]), train)
    np.testing.assert_allclose(fc.probs, [[1 / 3, 1 / 3, 1 / 3]])
    assert fc.point.tolist() == [2]
    # below/above tie without near average: lower index wins
    tie = CategoricalForecast(np.array([[0.5, 0.0, 0.5]]), np.array([[0.0, 1.0]]))
    assert tie.point.tolist() == [1]


def test_categorize_boundaries():
    cut = np.array([[1.0, 2.0]])
    assert categorize(np.array([1.0, 1.5, 2.0, 2.5]), np.repeat(cut, 4, axis=0)).tolist() == [1, 2, 2, 3]


def test_forecast_probability_validation():
    with pytest.raises(ValueError):
        CategoricalForecast(np.array([[0.5, 0.5, 0.5]]), np.zeros((1, 2)))


def test_climatology_nine_distinct_values():
    train = np.random.default_rng(3).permutation(np.arange(9.0))[None, :]
    np.testing.assert_array_equal(climatology_forecast(train).probs, [[1 / 3, 1 / 3, 1 / 3]])


def test_climatology_constant_series():
    fc = climatology_forecast(np.full((2, 6), 4.2))
    np.testing.assert_array_equal(fc.cutpoints, 4.2)
    np.testing.assert_array_equal(fc.probs, [[1, 0, 0], [1, 0, 0]])


@given(st.integers(0, 10_000), st.integers(3, 25))
def test_climatology_beats_uniform_in_sample(seed, n_t):
    train = np.random.default_rng(seed).normal(size=(5, n_t))
    fc = climatology_forecast(train)
    cats = categorize(train, fc.cutpoints)
    uniform = np.full((5, 3), 1 / 3)
    clim_scores = [rps(fc, cats[:, t]) for t in range(n_t)]
    unif_scores = [rps(uniform, cats[:, t]) for t in range(n_t)]
    assert np.mean(clim_scores) <= np.mean(unif_scores) + 1e-12


# ---------------------------------------------------------------- scores


@pytest.mark.parametrize("p", [0.0, 1 / 3, 2 / 3, 1.0])
def test_heidke_affine_in_accuracy(p):
    n = 3
    hits = round(p * n)
    obs = np.array([1, 2, 3])
    pred = np.where(np.arange(n) < hits, obs, obs % 3 + 1)
    assert heidke(pred, obs) == pytest.approx((p - 1 / 3) * 1.5, abs=1e-15)


def test_heidke_examples():
    assert heidke([1, 2, 3], [1, 2, 3]) == 1.0
    assert heidke([1, 1, 1], [1, 2, 3]) == 0.0
    assert heidke([1, 2, 1], [1, 2, 3]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        heidke([], [])


def test_rps_hand_cases():
    assert rps(np.array([[0.0, 1.0, 0.0]]), np.array([2])) == 0.0
    assert rps(np.full((1, 3), 1 / 3), np.array([1])) == pytest.approx(5 / 9, abs=1e-15)
    assert rps(np.array([[0.0, 0.0, 1.0]]), np.array([1])) == 2.0
    with pytest.raises(ValueError):
        rps(np.full((2, 3), 1 / 3), np.array([1]))


def test_rps_is_proper():
    rng = np.random.default_rng(4)
    p = np.array([0.2, 0.5, 0.3])
    obs = rng.choice([1, 2, 3], size=10_000, p=p)
    for q in ([0.3, 0.4, 0.3], [0.1, 0.6, 0.3], [1 / 3, 1 / 3, 1 / 3], [0.2, 0.3, 0.5]):
        diff = np.array([rps(p[None, :], [o]) - rps(np.array([q]), [o]) for o in obs])
        assert diff.mean() <= 3 * diff.std(ddof=1) / np.sqrt(diff.size)


# ---------------------------------------------------------------- LOO validation


def small_dataset(seed=0, n_t=7, sigma2_alpha=2.0):
    rng = np.random.default_rng(seed)
    locs, remote, knots = random_geometry(rng, 5, 12, 3)
    truth = ModelState(np.array([0.2, 0.5]), 0.6, 0.1, sigma2_alpha, 200.0, 800.0)
    sim = simulate(truth, locs, remote, knots, n_t, seed=seed)
    return sim.data, ModelConfig(knots)


def climatology_stub(train, X_t0, z_t0, model, sampler, G, seed):
    return train.Y.copy()


def test_climatology_stub_has_zero_relative_rps():
    data, model = small_dataset()
    reports = loo_validate(data, model, SamplerConfig(), forecaster=climatology_stub)
    assert len(reports) == data.n_t and all(r.error is None for r in reports)
    for r in reports:
        assert r.rps["RESP"] == r.rps["CLIM"]
    summary = skill_summary(reports)
    assert summary["models"]["RESP"]["rps_relative"]["median"] == pytest.approx(0.0, abs=1e-12)
    assert summary["models"]["RESP"]["n_years"] == data.n_t


def test_cutpoints_never_see_test_year():
    data, model = small_dataset(1)
    seen = []

    def recorder(train, X_t0, z_t0, model, sampler, G, seed):
        seen.append(tercile_cutpoints(train.Y))
        return train.Y.copy()

    loo_validate(data, model, SamplerConfig(), forecaster=recorder, years=[data.time_index[2]])
    Y = data.Y.copy()
    Y[:, 2] += 100.0
    shifted = replace(data, response=data.response.with_values(Y))
    loo_validate(shifted, model, SamplerConfig(), forecaster=recorder, years=[data.time_index[2]])
    np.testing.assert_array_equal(seen[0], seen[1])


def test_failed_year_is_recorded():
    data, model = small_dataset(2)

    def flaky(train, X_t0, z_t0, model, sampler, G, seed):
        if seed == flaky.bad:
            raise RuntimeError("boom")
        return train.Y.copy()

    flaky.bad = _fold_seed(0, 3)
    reports = loo_validate(data, model, SamplerConfig(), forecaster=flaky)
    assert reports[3].error == "RuntimeError: boom"
    assert sum(r.error is None for r in reports) == data.n_t - 1
    assert skill_summary(reports)["failed_years"] == [data.time_index[3]]


def test_loo_needs_four_times():
    data, model = small_dataset(n_t=3)
    with pytest.raises(ValueError):
        loo_validate(data, model, SamplerConfig())


def test_loo_deterministic_and_csv_round_trip(tmp_path):
    data, model = small_dataset(3, n_t=5)
    cfg = SamplerConfig(n_iter=60, n_burn=20, seed=9)
    metrics = ValidateConfig(G=40)
    a = loo_validate(data, model, cfg, metrics)
    b = loo_validate(data, model, cfg, metrics)
    assert [(r.heidke, r.rps, r.rps_relative) for r in a] == [(r.heidke, r.rps, r.rps_relative) for r in b]
    assert all(r.heidke["RESP"] <= 1 and r.rps["RESP"] >= 0 for r in a)
    write_skill_csv(tmp_path / "s.csv", a)
    rows = read_skill_csv(tmp_path / "s.csv")
    assert len(rows) == 2 * data.n_t
    assert rows[0]["rps"] == a[0].rps[rows[0]["model"]]
