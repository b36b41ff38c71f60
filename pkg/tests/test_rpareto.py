import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_gradient, chi_cutoff_gamma, intensity_2d_fd, phi_cdf

from precipextent.geo import pairwise_distance
from precipextent.rpareto import (DependenceError, DependenceFit, EventSet, RiskFunctional, ScoreObjective,
                                  Semivariogram, bootstrap_fit, chi, extract_events, fit_gradient_score,
                                  gradient_score, intensity_log_density, intensity_log_density_derivatives,
                                  norm_cdf, norm_ppf, score_weights)
from precipextent.simulate import make_rng, scattered_layout, simulate_eventset


def random_event(rng, m, spread=30.0):
    xy = rng.uniform(0, spread, (m, 2))
    return rng.uniform(1.0, 20.0, m), pairwise_distance(xy)


def test_semivariogram_invariants():
    sv = Semivariogram(0.7, 1.0, -0.4)
    assert sv(0.0, 2.0) == 0.0
    assert np.isclose(sv(5.0, 1.0), (5.0 / math.exp(1.0 - 0.4)) ** 0.7)
    for bad in (0.0, 2.5):
        with pytest.raises(ValueError):
            Semivariogram(bad, 0.0)


@given(st.lists(st.floats(0.1, 100.0), min_size=1, max_size=10), st.floats(0.01, 100.0), st.floats(0.05, 3.0))
def test_risk_functional_homogeneous(y, c, theta):
    r = RiskFunctional(theta)
    y = np.array(y)
    assert np.isclose(r(c * y), c * r(y), rtol=1e-10)
    assert np.isclose(r(np.ones(len(y))), 1.0)


def test_risk_functional_ignores_missing():
    r = RiskFunctional(2.0)
    assert np.isclose(r(np.array([3.0, np.nan, 4.0])), math.sqrt(12.5))


def test_single_site_intensity():
    assert np.isclose(intensity_log_density([3.0], [[0.0]], Semivariogram(1.0, 0.0)), -2 * math.log(3.0))


def test_bivariate_intensity_against_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(5):
        y1, y2 = rng.uniform(0.5, 5.0, 2)
        h = rng.uniform(0.5, 4.0)
        sv = Semivariogram(1.0, 0.0)
        g = float(sv(h))
        got = math.exp(intensity_log_density([y1, y2], [[0, h], [h, 0]], sv))
        assert abs(got / intensity_2d_fd(y1, y2, g) - 1) < 1e-4


def test_reference_site_invariance():
    rng = np.random.default_rng(1)
    sv = Semivariogram(0.8, 2.0, 0.3)
    for m in (2, 3, 6):
        y, d = random_event(rng, m)
        base = intensity_log_density(y, d, sv, temp=0.4)
        for _ in range(3):
            p = rng.permutation(m)
            assert abs(intensity_log_density(y[p], d[np.ix_(p, p)], sv, temp=0.4) / base - 1) < 1e-8


@given(st.integers(2, 7), st.floats(0.1, 50.0), st.integers(0, 10_000))
def test_intensity_homogeneity(m, c, seed):
    y, d = random_event(np.random.default_rng(seed), m)
    sv = Semivariogram(1.2, 2.5, 0.0)
    lhs = intensity_log_density(c * y, d, sv)
    rhs = intensity_log_density(y, d, sv) - (m + 1) * math.log(c)
    assert np.isclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_not_positive_definite_for_colocated_sites():
    d = np.zeros((3, 3))
    with pytest.raises(DependenceError):
        intensity_log_density([1.0, 2.0, 3.0], d, Semivariogram(1.0, 0.0))


def test_derivatives_against_finite_differences():
    rng = np.random.default_rng(2)
    sv = Semivariogram(0.9, 2.0, -0.2)
    for m in range(2, 9):
        y, d = random_event(rng, m)
        _, d1, d2 = intensity_log_density_derivatives(y, d, sv, 0.3)
        fd1 = central_gradient(lambda v: intensity_log_density(v, d, sv, 0.3), y, 1e-5)
        np.testing.assert_allclose(d1, fd1, rtol=1e-5, atol=1e-8)
        fd2 = np.array([(intensity_log_density_derivatives(y + 1e-5 * np.eye(m)[j], d, sv, 0.3)[1][j]
                         - intensity_log_density_derivatives(y - 1e-5 * np.eye(m)[j], d, sv, 0.3)[1][j]) / 2e-5
                        for j in range(m)])
        np.testing.assert_allclose(d2, fd2, rtol=1e-5, atol=1e-8)


def test_weight_partials():
    rng = np.random.default_rng(3)
    for theta in (1.0, 0.12, 2.0):
        y = rng.uniform(1, 10, 6)
        u = 0.5 * RiskFunctional(theta)(y)
        w, dw = score_weights(y, u, theta)
        for j in range(6):
            e = 1e-6 * np.eye(6)[j]
            fd = (score_weights(y + e, u, theta)[0][j] - score_weights(y - e, u, theta)[0][j]) / 2e-6
            assert np.isclose(dw[j], fd, rtol=1e-6)


def test_score_formula():
    rng = np.random.default_rng(4)
    sv = Semivariogram(1.1, 2.2, 0.5)
    y, d = random_event(rng, 5)
    u = 0.7 * RiskFunctional(0.5)(y)
    w, dw = score_weights(y, u, 0.5)
    _, g1, g2 = intensity_log_density_derivatives(y, d, sv, -0.2)
    expect = np.sum(2 * w * dw * g1 + w * w * g2 + 0.5 * w * w * g1 * g1)
    assert np.isclose(gradient_score(y, d, sv, u, 0.5, -0.2), expect, rtol=1e-10)


def test_score_vanishes_on_boundary_and_is_symmetric():
    rng = np.random.default_rng(5)
    sv = Semivariogram(0.6, 2.0)
    y, d = random_event(rng, 6)
    u = RiskFunctional(1.0)(y)
    assert abs(gradient_score(y, d, sv, u, 1.0)) < 1e-12
    p = rng.permutation(6)
    s = gradient_score(y, d, sv, 0.5 * u, 1.0)
    assert np.isclose(gradient_score(y[p], d[np.ix_(p, p)], sv, 0.5 * u, 1.0), s, rtol=1e-10)
    with pytest.raises(DependenceError):
        gradient_score(y, d, sv, 2 * u, 1.0)


def make_events(n=60, k=12, theta=1.0, seed=0, missing=0.0, truth=Semivariogram(0.5, 2.0, -0.3)):
    coords = scattered_layout(k, 20.0, seed)
    cov = make_rng(seed + 1).standard_normal(500)
    ev = simulate_eventset(truth, cov, coords, n, theta, seed + 2)
    if missing:
        vals = ev.values.copy()
        drop = make_rng(seed + 3).uniform(size=vals.shape) < missing
        drop[:, :2] = False
        vals[drop] = np.nan
        r = RiskFunctional(theta)(vals)
        ev = EventSet(ev.station_ids, ev.coords, ev.days, ev.temp, vals, r, ev.u, theta)
        ev = ev.take(np.flatnonzero(r >= ev.u))
    return ev


def test_objective_matches_per_event_scores():
    ev = make_events(missing=0.3)
    obj = ScoreObjective(ev)
    params = (0.7, 1.5, -0.2)
    sv = Semivariogram(*params)
    expect = []
    for e in ev:
        d = ev.dist[np.ix_(e.sites, e.sites)]
        expect.append(gradient_score(e.values, d, sv, ev.u, ev.theta, e.temp))
    np.testing.assert_allclose(obj.scores(params), expect, rtol=1e-9)
    assert np.isclose(obj(params), np.mean(expect), rtol=1e-12)


def qualifying_field(n_days, k=8, seed=0):
    rng = np.random.default_rng(seed)
    vals = 1.0 / rng.uniform(size=(n_days, k))

    class Field:
        station_ids = tuple(f"s{i}" for i in range(k))
        coords_km = rng.uniform(0, 100, (k, 2))
        dates = pd.date_range("2000-01-01", periods=n_days).to_numpy()
        temp = rng.normal(size=n_days)
        values = vals
    return Field


def test_extract_events_quantile():
    f = qualifying_field(100)
    ev = extract_events(f, 1.0)
    assert len(ev) == 20
    assert np.all(ev.r >= ev.u)
    ev12 = extract_events(f, 0.12)
    assert len(ev12) == len(ev)
    assert len(set(ev.days) & set(ev12.days)) > 0


def test_extract_events_min_obs():
    f = qualifying_field(30)
    f.values = f.values.copy()
    f.values[:, :4] = np.nan
    with pytest.raises(DependenceError):
        extract_events(f, 1.0, min_obs=5)
    g = qualifying_field(30, seed=1)
    g.values = g.values.copy()
    g.values[:5, :4] = np.nan
    ev = extract_events(g, 1.0, min_obs=5, min_days=20)
    assert np.all(np.sum(~np.isnan(ev.values), axis=1) >= 5)


def test_eventset_csv_round_trip(tmp_path):
    ev = make_events(n=10, missing=0.2)
    ev.to_csv(tmp_path / "e.csv")
    back = EventSet.from_csv(tmp_path / "e.csv", ev.station_ids, ev.coords)
    np.testing.assert_array_equal(back.values, ev.values)
    np.testing.assert_array_equal(back.temp, ev.temp)
    assert back.u == ev.u and back.theta == ev.theta


def test_fit_needs_enough_events():
    with pytest.raises(DependenceError):
        fit_gradient_score(make_events(n=10))


def test_score_minimised_near_true_slope():
    ev = make_events(n=600, k=20, seed=10)
    obj = ScoreObjective(ev)
    grid = np.array([-0.9, -0.6, -0.3, 0.0, 0.3])
    vals = [obj((0.5, 2.0, l1)) for l1 in grid]
    assert grid[int(np.argmin(vals))] == -0.3


def test_bootstrap_reproducible_and_degenerate(tmp_path):
    ev = make_events(n=40, k=10, seed=20)
    a = bootstrap_fit(ev, replicates=5, seed=3)
    b = bootstrap_fit(ev, replicates=5, seed=3)
    np.testing.assert_array_equal(a.bootstrap, b.bootstrap)
    assert a.bootstrap.shape == (5, 3) and a.n_failed == 0
    q = a.quantiles()
    assert list(q.columns) == ["q2.5", "q25", "q50", "q75", "q97.5"]
    a.to_json(tmp_path / "f.json")
    back = DependenceFit.from_json(tmp_path / "f.json")
    np.testing.assert_array_equal(back.bootstrap, a.bootstrap)
    assert back.estimate.tolist() == a.estimate.tolist()

    one = ev.take(np.zeros(25, dtype=int))
    one = EventSet(one.station_ids, one.coords, one.days, one.temp + np.linspace(0, 1, 25),
                   one.values, one.r, one.u, one.theta)
    rep = one.take(np.zeros(25, dtype=int))
    fit = bootstrap_fit(rep, replicates=4, seed=1)
    assert np.all(np.ptp(fit.bootstrap, axis=0) == 0)


def test_chi():
    sv = Semivariogram(1.0, 0.0)
    assert chi(sv, 0.0) == 1.0
    assert chi(sv, 1e6) < 1e-100
    g = chi_cutoff_gamma()
    assert abs(g - 7.6829) < 1e-3
    assert abs(chi(sv, 7.6829) - 0.05) < 1e-4
    h = np.linspace(0, 50, 200)
    assert np.all(np.diff(chi(Semivariogram(0.7, 1.0, 0.5), h, 0.3)) <= 0)


def test_normal_functions():
    for x in (-6.0, -1.3, 0.0, 0.4, 1.959964, 5.0):
        assert abs(norm_cdf(x) - phi_cdf(x)) < 1e-10
    assert abs(norm_cdf(1.959964) - 0.975) < 1e-6
    assert abs(norm_ppf(0.975) - 1.959963984540054) < 1e-10


def test_oracle_dependence_part_consistent():
    from oracles import dependence_part_2d, exponent_measure_2d
    for y1, y2, g in ((2.0, 3.0, 1.5), (0.5, 4.0, 0.2), (6.0, 1.0, 8.0)):
        assert np.isclose(dependence_part_2d(y1, y2, g), exponent_measure_2d(y1, y2, g) - 1 / y1 - 1 / y2,
                          rtol=1e-10, atol=1e-14)


@pytest.mark.slow
def test_null_slope_interval_covers_zero():
    truth = Semivariogram(0.5, 2.0, 0.0)
    cov = make_rng(1).standard_normal(2000)
    cov = (cov - cov.mean()) / cov.std()
    coords = scattered_layout(30, 20.0, 100)
    hits = 0
    for rep in range(100):
        ev = simulate_eventset(truth, cov, coords, 200, seed=5000 + rep)
        ev = EventSet(ev.station_ids, ev.coords, ev.days, make_rng(rep).permutation(ev.temp), ev.values,
                      ev.r, ev.u, ev.theta)
        fit = bootstrap_fit(ev, 100, seed=rep)
        lo, hi = np.quantile(fit.bootstrap[:, 2], [0.025, 0.975])
        hits += lo <= 0.0 <= hi
    assert hits >= 90
