import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import chi_cutoff_gamma

from precipextent.covariate import CovariateSeries, ScenarioSeries, average_scenarios
from precipextent.extent import (ExtentError, effective_range, log_effective_range, project_series,
                                 scenario_report, season_year)
from precipextent.ingest import SeasonDef
from precipextent.rpareto import DependenceFit, Semivariogram, chi


def make_fit(nu=1.0, l0=1.0, l1=-0.49, theta=1.0, constants=None):
    return DependenceFit(nu, l0, l1, 0.0, 100, 1.0, theta, covariate_constants=constants)


def hist_series(start="1961-01-01", end="2015-12-31", mean=8.0, sd=2.0, seed=0):
    dates = pd.date_range(start, end)
    vals = np.random.default_rng(seed).standard_normal(len(dates))
    return CovariateSeries(dates, vals, mean, sd)


def scenario(gcm, raw_shift, hist, scen="rcp85", start="2006-01-01", end="2100-12-31"):
    dates = pd.date_range(start, end)
    raw = hist.mean + raw_shift + np.zeros(len(dates))
    return ScenarioSeries(gcm, scen, dates, raw, {}, hist.mean, hist.sd)


def test_cutoff_constant():
    z = 2.0 * 1.959963984540054 ** 2
    assert abs(z - 7.6829) < 1e-3
    assert abs(chi_cutoff_gamma() - z) < 1e-8


def test_unit_case_and_doubling():
    sv = Semivariogram(1.0, 0.0, 0.0)
    assert abs(effective_range(sv) - 7.6829) < 1e-3
    assert np.isclose(effective_range(Semivariogram(1.0, math.log(2.0))), 2 * effective_range(sv))


@given(st.floats(0.1, 1.99), st.floats(-2, 4), st.floats(-1, 1), st.floats(-3, 3))
def test_tail_correlation_at_range_equals_cutoff(nu, l0, l1, t):
    sv = Semivariogram(nu, l0, l1)
    h = effective_range(sv, t)
    assert abs(chi(sv, h, t) - 0.05) < 1e-6


def test_range_monotone_in_slope_direction():
    t = np.linspace(-3, 3, 50)
    assert np.all(np.diff(effective_range(Semivariogram(0.8, 1.0, 0.3), t)) > 0)
    assert np.all(np.diff(effective_range(Semivariogram(0.8, 1.0, -0.3), t)) < 0)
    lr = log_effective_range(Semivariogram(0.8, 1.0, -0.3), t)
    np.testing.assert_allclose(np.diff(lr), -0.3 * (t[1] - t[0]), rtol=1e-10)


def test_two_sd_warming_shrinks_log_range():
    hist = hist_series()
    fit = make_fit(constants=hist.constants)
    base = project_series(fit, CovariateSeries(hist.dates, np.zeros(len(hist.dates)), hist.mean, hist.sd))
    warm = project_series(fit, scenario("AWI", 2 * hist.sd, hist))
    assert np.isclose(warm.log_range[0] - base.log_range[0], -0.98, atol=1e-12)


def test_constant_covariate_gives_flat_series():
    hist = hist_series()
    flat = CovariateSeries(hist.dates, np.full(len(hist.dates), 0.7), hist.mean, hist.sd)
    sm = project_series(make_fit(), flat).smoothed()
    np.testing.assert_allclose(sm.to_numpy(), 1.0 - 0.49 * 0.7 + math.log(2.0 * 1.959963984540054 ** 2) / 1.0, atol=1e-6)


def test_season_year_moves_december():
    d = pd.to_datetime(["2000-12-15", "2001-01-15", "2001-11-30"])
    np.testing.assert_array_equal(season_year(d, SeasonDef()), [2001, 2001, 2001])


def test_smoothing_window():
    dates = pd.date_range("2000-01-01", "2019-12-31")
    year = dates.year.to_numpy()
    vals = (year - 2000).astype(float)
    s = project_series(make_fit(l1=1.0, l0=0.0), CovariateSeries(dates, vals, 0.0, 1.0), season="Summer")
    sm = s.smoothed(window=10)
    yearly = s.yearly()
    assert np.isclose(sm.loc[2010], yearly.loc[2005:2014].mean())


def test_zero_slope_identical_across_scenarios():
    hist = hist_series()
    scen = [scenario(g, s, hist) for g, s in (("AWI", 1.0), ("MIROC", 3.0), ("NorESM", -1.0))]
    scen.append(average_scenarios(scen))
    fits = {("Summer", 1.0): make_fit(l1=0.0)}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        extent, summary, _ = scenario_report(fits, hist, scen)
    np.testing.assert_allclose(summary["log_range_change"], 0.0, atol=1e-12)
    fut = extent[extent["year"] > 2030].groupby("gcm")["log_range_km"].apply(np.array)
    for g in fut.index:
        np.testing.assert_allclose(fut[g], fut["AWI"], atol=1e-12)


def test_average_member_matches_mean_change():
    hist = hist_series()
    scen = [scenario(g, s, hist) for g, s in (("AWI", 1.0), ("MIROC", 3.0), ("NorESM", -1.0))]
    scen.append(average_scenarios(scen))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, summary, _ = scenario_report({("Winter", 1.0): make_fit()}, hist, scen)
    ch = summary.set_index("gcm")["log_range_change"]
    assert np.isclose(ch["AVG"], ch[["AWI", "MIROC", "NorESM"]].mean(), atol=1e-9)


def test_outputs_written(tmp_path):
    hist = hist_series()
    scen = [scenario(g, 1.0, hist) for g in ("AWI", "MIROC", "NorESM", "AVG")]
    extent, summary, manifest = scenario_report({("Summer", 1.0): make_fit()}, hist, scen, outdir=tmp_path,
                                                basin="Test")
    assert (tmp_path / "extent.csv").exists() and (tmp_path / "extent_manifest.json").exists()
    back = pd.read_csv(tmp_path / "extent_summary.csv")
    assert len(back) == len(summary) == 4
    assert manifest["cutoff"] == 0.05 and len(manifest["fits"]) == 1


def test_empty_scenarios_still_report_history():
    extent, summary, _ = scenario_report({("Summer", 1.0): make_fit()}, hist_series(), [])
    assert set(extent["scenario"]) == {"historical"}
    assert summary.empty


def test_missing_combination_warns():
    hist = hist_series()
    with pytest.warns(UserWarning) as rec:
        scenario_report({("Summer", 1.0): make_fit()}, hist, [scenario("AWI", 1.0, hist)])
    assert {str(w.message).split()[1] for w in rec} == {"MIROC", "NorESM", "AVG"}


def test_constants_mismatch():
    hist = hist_series()
    fit = make_fit(constants={"mean": 5.0, "sd": 2.0})
    with pytest.raises(ExtentError):
        project_series(fit, hist)
