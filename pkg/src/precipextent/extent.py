"""Effective tail-correlation range and its projection under covariate scenarios.

For a power semivariogram ``(h / lam_t) ** nu`` with ``lam_t = exp(lambda0 +
lambda1 * temp_t)`` the tail correlation ``2 - 2 Phi(sqrt(gamma / 2))`` falls to
``cutoff`` at ``h* = lam_t * (2 z**2) ** (1 / nu)`` where ``z`` is the
``1 - cutoff / 2`` normal quantile.  So ``log h*`` is affine in ``temp_t``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import SeasonDef
from .rpareto import CHI_CUTOFF, DependenceFit, Semivariogram, norm_ppf

log = logging.getLogger(__name__)

SMOOTHING_YEARS = 10
HISTORICAL_YEARS = (1965, 2015)
FUTURE_YEARS = (2016, 2100)
GCMS = ("AWI", "MIROC", "NorESM", "AVG")


class ExtentError(ValueError):
    pass


def _semivariogram(fit) -> Semivariogram:
    return fit.semivariogram if isinstance(fit, DependenceFit) else fit


def log_effective_range(fit, temp, cutoff: float = CHI_CUTOFF):
    sv = _semivariogram(fit)
    z = norm_ppf(1.0 - cutoff / 2.0)
    temp = np.asarray(temp, dtype=float)
    return sv.lambda0 + sv.lambda1 * temp + np.log(2.0 * z * z) / sv.nu


def effective_range(fit, temp=0.0, cutoff: float = CHI_CUTOFF):
    """Distance (km) at which the tail correlation drops to ``cutoff``."""
    out = np.exp(log_effective_range(fit, temp, cutoff))
    return float(out) if np.ndim(out) == 0 else out


def season_year(dates, seasons: SeasonDef) -> np.ndarray:
    """Calendar year, except that December joins the next year when it shares January's season."""
    dates = pd.DatetimeIndex(dates)
    shift = seasons.months[12] == seasons.months[1]
    return dates.year.to_numpy() + (shift & (dates.month.to_numpy() == 12))


@dataclass(frozen=True)
class ExtentSeries:
    dates: pd.DatetimeIndex
    log_range: np.ndarray
    scenario: str = "historical"
    gcm: str = "OBS"
    basin: str = ""
    season: str | None = None
    theta: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_range)):
            raise ExtentError("log-range must be finite")

    @property
    def range_km(self) -> np.ndarray:
        return np.exp(self.log_range)

    def yearly(self, seasons: SeasonDef | None = None) -> pd.Series:
        """Mean daily log-range per season-year."""
        seasons = seasons or SeasonDef()
        years = season_year(self.dates, seasons)
        return pd.Series(self.log_range).groupby(years).mean()

    def smoothed(self, window: int = SMOOTHING_YEARS, seasons: SeasonDef | None = None) -> pd.Series:
        """Centred moving average of the season-year means (shorter at the ends)."""
        y = self.yearly(seasons)
        y = y.reindex(range(int(y.index.min()), int(y.index.max()) + 1))
        return y.rolling(window, center=True, min_periods=1).mean()


def _check_constants(fit, series) -> None:
    expected = getattr(fit, "covariate_constants", None)
    have = getattr(series, "constants", None)
    if expected is None or have is None:
        return
    for k in ("mean", "sd"):
        if not np.isclose(expected[k], have[k], rtol=1e-9, atol=0.0):
            raise ExtentError(f"covariate standardized with {k} {have[k]!r}, fit expects {expected[k]!r}")


def project_series(fit, series, season: str | None = None, seasons: SeasonDef | None = None,
                   cutoff: float = CHI_CUTOFF, basin: str = "") -> ExtentSeries:
    """Daily effective range along a covariate series, optionally restricted to one season."""
    _check_constants(fit, series)
    dates = pd.DatetimeIndex(series.dates)
    values = np.asarray(series.values, dtype=float)
    if season is not None:
        keep = (seasons or SeasonDef())(dates) == season
        dates, values = dates[keep], values[keep]
    return ExtentSeries(dates, log_effective_range(fit, values, cutoff),
                        getattr(series, "scenario", "historical"), getattr(series, "gcm", "OBS"),
                        basin, season, getattr(fit, "theta", None),
                        {"cutoff": cutoff, "smoothing_years": SMOOTHING_YEARS})


def fit_hash(fit: DependenceFit) -> str:
    blob = json.dumps(fit.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _period_mean(yearly: pd.Series, years) -> float:
    sel = yearly[(yearly.index >= years[0]) & (yearly.index <= years[1])]
    return float(sel.mean()) if len(sel) else np.nan


def scenario_report(fits: dict, historical, scenarios=(), outdir=None, basin: str = "",
                    seasons: SeasonDef | None = None, window: int = SMOOTHING_YEARS,
                    hist_years=HISTORICAL_YEARS, future_years=FUTURE_YEARS,
                    expected_gcms=GCMS, cutoff: float = CHI_CUTOFF):
    """Effective-range projections for every fitted (season, theta) and scenario series.

    ``fits`` maps ``(season, theta)`` to a DependenceFit; ``historical`` is the
    observed CovariateSeries; ``scenarios`` are ScenarioSeries.  Returns
    ``(extent, summary, manifest)`` and writes ``extent.csv``,
    ``extent_summary.csv`` and ``extent_manifest.json`` when ``outdir`` is set.
    """
    seasons = seasons or SeasonDef()
    scenarios = list(scenarios)
    present = {(s.scenario, s.gcm) for s in scenarios}
    for scen in sorted({s.scenario for s in scenarios}):
        for g in expected_gcms:
            if (scen, g) not in present:
                warnings.warn(f"no {g} series for {scen}; combination omitted", stacklevel=2)
    rows, summary = [], []
    for (season, theta), fit in sorted(fits.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        hist = project_series(fit, historical, season, seasons, cutoff, basin)
        hist_yearly = hist.yearly(seasons)
        base = _period_mean(hist_yearly, hist_years)
        for series in [hist] + [project_series(fit, s, season, seasons, cutoff, basin) for s in scenarios]:
            sm = series.smoothed(window, seasons)
            rows.append(pd.DataFrame({"basin": basin, "season": season, "theta": theta,
                                      "scenario": series.scenario, "gcm": series.gcm,
                                      "year": sm.index.astype(int), "log_range_km": sm.to_numpy()}))
            if series is not hist:
                change = _period_mean(series.yearly(seasons), future_years) - base
                summary.append({"basin": basin, "season": season, "theta": theta,
                                "scenario": series.scenario, "gcm": series.gcm,
                                "historical_mean_log_range": base, "log_range_change": change})
    cols = ["basin", "season", "theta", "scenario", "gcm", "year", "log_range_km"]
    extent = pd.concat(rows, ignore_index=True)[cols] if rows else pd.DataFrame(columns=cols)
    summary = pd.DataFrame(summary, columns=["basin", "season", "theta", "scenario", "gcm",
                                             "historical_mean_log_range", "log_range_change"])
    manifest = {
        "cutoff": cutoff, "smoothing": f"centred {window}-year moving average of season-year mean log-range",
        "historical_years": list(hist_years), "future_years": list(future_years),
        "fits": {f"{season}|{theta:g}": fit_hash(fit) for (season, theta), fit in fits.items()
                 if isinstance(fit, DependenceFit)},
        "scenarios": sorted(f"{s.scenario}|{s.gcm}" for s in scenarios),
    }
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        extent.to_csv(outdir / "extent.csv", index=False, float_format="%.10g")
        summary.to_csv(outdir / "extent_summary.csv", index=False, float_format="%.10g")
        with open(outdir / "extent_manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return extent, summary, manifest
