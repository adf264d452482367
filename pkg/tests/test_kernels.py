import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import entrywise_cov, great_circle_brute, matern_mp
from resp.kernels import (
    EARTH_RADIUS_KM,
    LocalCovParams,
    Location,
    MaternParams,
    NearSingularError,
    build_local_cov,
    build_remote_matrices,
    distance_matrix,
    great_circle_km,
    matern,
)

lons = st.floats(-180, 179.999)
lats = st.floats(-90, 90)
points = st.tuples(lons, lats)


def test_location_validation():
    Location(-180.0, 90.0)
    for lon, lat in [(180.0, 0.0), (0.0, 91.0), (float("nan"), 0.0)]:
        with pytest.raises(ValueError):
            Location(lon, lat)


def test_matern_params_validation():
    with pytest.raises(ValueError):
        MaternParams(0.0, 1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, 1.0, nu=-0.5)
    with pytest.raises(ValueError):
        LocalCovParams(MaternParams(1.0, 1.0), -1.0)


def test_great_circle_examples():
    o = Location(0.0, 0.0)
    assert great_circle_km(o, o) == 0.0
    assert great_circle_km(o, Location(-180.0, 0.0)) == pytest.approx(math.pi * 6371.0, rel=1e-12)
    assert great_circle_km(o, Location(90.0, 0.0)) == pytest.approx(math.pi / 2 * 6371.0, rel=1e-12)
    assert math.pi * EARTH_RADIUS_KM == pytest.approx(20015.09, abs=0.01)


@given(points, points)
def test_great_circle_matches_vector_formula(u, v):
    assert great_circle_km(u, v) == pytest.approx(great_circle_brute(u, v), abs=1e-6)


@given(points, points, points)
def test_great_circle_metric(u, v, w):
    duv, dvu = great_circle_km(u, v), great_circle_km(v, u)
    assert duv == pytest.approx(dvu, abs=1e-9)
    assert duv <= great_circle_km(u, w) + great_circle_km(w, v) + 1e-6


def test_matern_zero_lag_is_variance():
    for nu in (0.5, 1.5, 2.5, 0.3):
        assert matern(0.0, MaternParams(3.7, 12.0, nu)) == 3.7


def test_matern_exponential_case():
    assert matern(100.0, MaternParams(1.0, 100.0, 0.5)) == pytest.approx(math.exp(-1), rel=1e-14)


def test_matern_nu_three_halves_against_bessel_oracle():
    val = matern(50.0, MaternParams(2.0, 50.0, 1.5))
    assert val == pytest.approx(matern_mp(50.0, 2.0, 50.0, 1.5), rel=1e-13)
    # closed form for nu = 3/2 with unit scaled distance
    assert val == pytest.approx(2.0 * 2.0 * math.exp(-1.0), rel=1e-13)


@given(st.floats(0.01, 20), st.floats(0.2, 3.0), st.floats(0.1, 5.0))
def test_matern_general_nu_against_bessel_oracle(x, nu, sigma2):
    rho = 80.0
    assert matern(x * rho, MaternParams(sigma2, rho, nu)) == pytest.approx(
        matern_mp(x * rho, sigma2, rho, nu), rel=1e-10
    )


def test_matern_exponential_closed_form_over_range():
    p = MaternParams(1.7, 250.0, 0.5)
    d = np.linspace(0, 10 * p.rho, 2001)
    np.testing.assert_allclose(matern(d, p), p.sigma2 * np.exp(-d / p.rho), rtol=1e-12, atol=0)


@given(st.floats(0.3, 3.0))
def test_matern_strictly_decreasing(nu):
    d = np.linspace(0, 500, 200)
    v = matern(d, MaternParams(1.0, 50.0, nu))
    assert np.all(np.diff(v) < 0)


def test_matern_rejects_negative_distance():
    with pytest.raises(ValueError):
        matern(-1.0, MaternParams(1.0, 1.0))


def test_local_cov_single_point():
    S = build_local_cov([Location(0.0, 0.0)], LocalCovParams(MaternParams(1.0, 10.0), 0.5))
    np.testing.assert_array_equal(S, [[1.5]])


def test_local_cov_antipodal_underflows_to_zero():
    S = build_local_cov([Location(0.0, 0.0), Location(-180.0, 0.0)], LocalCovParams(MaternParams(1.0, 1.0)))
    assert S[0, 1] == 0.0 and S[1, 0] == 0.0


def test_local_cov_grid_entrywise():
    locs = [Location(lo, la) for lo in (-105.0, -104.0) for la in (39.0, 40.0)]
    p = LocalCovParams(MaternParams(1.3, 120.0, 1.5), 0.2)
    S = build_local_cov(locs, p)
    expect = entrywise_cov(np.array([[q.lon, q.lat] for q in locs]), None, 1.3, 120.0, 1.5) + 0.2 * np.eye(4)
    np.testing.assert_allclose(S, expect, rtol=1e-12)
    np.testing.assert_allclose(np.diag(S), 1.5)


@given(st.integers(2, 15), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_local_cov_spd_with_nugget(n, nugget, seed):
    rng = np.random.default_rng(seed)
    ll = np.c_[rng.uniform(-110, -100, n), rng.uniform(35, 42, n)]
    S = build_local_cov(ll, LocalCovParams(MaternParams(1.0, 300.0), nugget))
    np.testing.assert_array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= nugget - 1e-10


def test_local_cov_duplicate_warns():
    with pytest.warns(RuntimeWarning, match="duplicate"):
        build_local_cov([(0.0, 0.0), (0.0, 0.0)], LocalCovParams(MaternParams(1.0, 1.0)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_local_cov([(0.0, 0.0), (0.0, 0.0)], LocalCovParams(MaternParams(1.0, 1.0), 0.1))


def test_remote_single_knot():
    rl = np.array([[-150.0, 0.0], [-140.0, 5.0], [-130.0, 10.0]])
    p = MaternParams(2.0, 900.0)
    R, c = build_remote_matrices(rl, [(-145.0, 3.0)], p)
    np.testing.assert_array_equal(R, [[2.0]])
    np.testing.assert_allclose(c[:, 0], [matern(great_circle_km(r, (-145.0, 3.0)), p) for r in rl])


def test_remote_knots_subset_rows_match():
    rng = np.random.default_rng(2)
    rl = np.c_[rng.uniform(-170, -120, 8), rng.uniform(-10, 30, 8)]
    R, c = build_remote_matrices(rl, rl[[1, 4, 6]], MaternParams(1.5, 700.0))
    np.testing.assert_allclose(c[[1, 4, 6]], R, rtol=1e-15)


def test_remote_entrywise_oracle():
    rng = np.random.default_rng(11)
    rl = np.c_[rng.uniform(-170, -120, 6), rng.uniform(-10, 30, 6)]
    kn = np.c_[rng.uniform(-170, -120, 3), rng.uniform(-10, 30, 3)]
    R, c = build_remote_matrices(rl, kn, MaternParams(1.1, 1000.0))
    np.testing.assert_allclose(R, entrywise_cov(kn, None, 1.1, 1000.0, 0.5), rtol=1e-14)
    np.testing.assert_allclose(c, entrywise_cov(rl, kn, 1.1, 1000.0, 0.5), rtol=1e-14)
    np.testing.assert_allclose(np.diag(R), 1.1)


def test_remote_duplicate_knots_rejected():
    with pytest.raises(NearSingularError):
        build_remote_matrices([(0.0, 0.0), (1.0, 1.0)], [(0.0, 0.0), (0.0, 0.0)], MaternParams(1.0, 1.0))


def test_distance_matrix_symmetric_zero_diagonal():
    rng = np.random.default_rng(4)
    ll = np.c_[rng.uniform(-180, 180, 10), rng.uniform(-90, 90, 10)]
    D = distance_matrix(ll)
    np.testing.assert_array_equal(np.diag(D), 0.0)
    np.testing.assert_allclose(D, D.T, atol=1e-9)
