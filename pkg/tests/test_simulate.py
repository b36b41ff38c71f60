import json

import numpy as np
import pytest
from scipy import stats

from precipextent.rpareto import RiskFunctional, Semivariogram
from precipextent.simulate import (FbmSampler, RParetoSampler, SimulationError, effective_range_closed_form,
                                   figure4, grid_layout, lognormal_field, make_rng, sample_extremal_function,
                                   sample_fbm, sample_rpareto, scattered_layout, simulate_eventset,
                                   write_figure4)

COORDS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [0.5, 0.5]])


def test_pinned_at_origin():
    s = FbmSampler(COORDS, nu=1.0, range=2.0)
    draws = sample_fbm(s, 1, n=100)
    assert np.all(draws[:, 0] == 0.0)
    off = FbmSampler(COORDS, nu=1.0, range=2.0, origin=[0.5, 0.5])
    assert np.all(sample_fbm(off, 1, n=10)[:, 4] == 0.0)


def test_variance_and_increments():
    s = FbmSampler(COORDS, nu=1.5, range=2.0)
    g = sample_fbm(s, 7, n=40_000)
    var = g.var(axis=0)
    expect = 2 * s.gamma(s.dist_origin)
    np.testing.assert_allclose(var[1:], expect[1:], rtol=0.05)
    inc = np.var(g[:, 3] - g[:, 1])
    assert abs(inc / (2 * s.gamma(s.dist[3, 1])) - 1) < 0.05


def test_lognormal_unit_mean():
    s = FbmSampler(COORDS, nu=1.0, range=4.0)
    x = lognormal_field(s, sample_fbm(s, 3, n=60_000))
    np.testing.assert_allclose(x.mean(axis=0), 1.0, rtol=0.05)


def test_extremal_function():
    s = FbmSampler(COORDS, nu=1.0, range=3.0)
    w = sample_extremal_function(s, 2, 5, n=60_000)
    assert np.all(w[:, 2] == 1.0)
    np.testing.assert_allclose(w.mean(axis=0), 1.0, rtol=0.05)
    flat = FbmSampler(COORDS, nu=1.0, range=1e6)
    np.testing.assert_allclose(sample_extremal_function(flat, 1, 5, n=50), 1.0, atol=1e-2)
    with pytest.raises(IndexError):
        sample_extremal_function(s, 5, 0)


def test_profiles_normalised_and_radial_pareto():
    s = FbmSampler(scattered_layout(10, 10.0, 1), nu=1.0, range=2.0)
    risk = RiskFunctional(0.5)
    sampler = RParetoSampler(s, risk, alpha=2.5)
    z, radial, profile = sampler.sample(3000, make_rng(0), u=2.0)
    np.testing.assert_allclose(risk(profile), 1.0, atol=1e-12)
    np.testing.assert_allclose(risk(z), 2.0 * radial, rtol=1e-12)
    assert stats.kstest(radial, lambda x: 1 - x ** -2.5).pvalue > 0.01


def test_constant_field_when_range_is_huge():
    s = FbmSampler(grid_layout(4), nu=1.0, range=1e9)
    z = sample_rpareto(RParetoSampler(s), 20, seed=3)
    np.testing.assert_allclose(z / z[:, :1], 1.0, atol=1e-3)


def test_sampler_input_errors():
    with pytest.raises(SimulationError):
        FbmSampler(np.array([[0.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(SimulationError):
        FbmSampler(COORDS, nu=2.5)
    with pytest.raises(SimulationError):
        RParetoSampler(FbmSampler(COORDS), alpha=0.0)


def test_layouts():
    np.testing.assert_array_equal(scattered_layout(5, 10, 4), scattered_layout(5, 10, 4))
    g = grid_layout(3, 2, spacing=2.0)
    assert g.shape == (6, 2) and g.max() == 4.0


def test_effective_range_values():
    for lam, expect in ((2, 15.37), (5, 38.41), (10, 76.83)):
        assert abs(effective_range_closed_form(lam) - expect) < 0.01


def test_figure4_deterministic(tmp_path):
    a = figure4(seed=9, n=12)
    b = figure4(seed=9, n=12)
    for lam in a:
        np.testing.assert_array_equal(a[lam]["field"], b[lam]["field"])
    m = write_figure4(a, tmp_path, 9)
    assert json.loads((tmp_path / "figure4_manifest.json").read_text()) == m
    assert [p["lambda"] for p in m["panels"]] == [2.0, 5.0, 10.0]


def log_spread(values):
    return np.std(np.log(values), axis=1)


def test_slope_zero_gives_exchangeable_events():
    truth = Semivariogram(1.0, 1.5, 0.0)
    cov = make_rng(0).standard_normal(400)
    ev = simulate_eventset(truth, cov, scattered_layout(12, 20.0, 2), 1500, seed=4)
    rho = stats.spearmanr(ev.temp, log_spread(ev.values)).statistic
    assert abs(rho) < 0.08


def test_positive_slope_strengthens_dependence():
    truth = Semivariogram(1.0, 1.5, 0.6)
    cov = make_rng(0).standard_normal(400)
    ev = simulate_eventset(truth, cov, scattered_layout(12, 20.0, 2), 1500, seed=5)
    spread = log_spread(ev.values)
    assert spread[ev.temp > 0.5].mean() < spread[ev.temp < -0.5].mean()
    assert np.all(ev.r >= ev.u)


def test_bivariate_angular_law_matches_exponent_measure():
    from oracles import angular_tail_moment
    s = FbmSampler(np.array([[0.0, 0.0], [3.0, 0.0]]), nu=1.0, range=2.0)
    g = float(s.gamma(3.0))
    prof = RParetoSampler(s, RiskFunctional(1.0)).profiles(40_000, make_rng(8))
    w = prof[:, 0] / prof.sum(axis=1)
    for cut in (0.2, 0.5, 0.8):
        emp = np.mean(w * (w > cut))
        se = np.std(w * (w > cut)) / np.sqrt(len(w))
        assert abs(emp - angular_tail_moment(cut, g)) < 4 * se
