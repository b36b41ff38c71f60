"""Basin-mean temperature covariate built by kriging station data.

The mean surface is an additive spline model in lon/lat, elevation, day of
year and (for observations) year.  Residuals get an exponential covariance
``sigma2 * exp(-h / rho)`` plus a nugget, fitted to a binned empirical
semivariogram that pools all days.  Daily basin means are spatial averages of
the simple-kriging surface over a regular grid; the covariate is the trailing
30-day mean of those, standardized over a training period.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import least_squares
from shapely import contains_xy
from shapely.geometry import Polygon

from .gam import GamError, LinearPredictorSpec, PenalizedFit, canonical_spec, fit_gam
from .geo import pairwise_distance, project_km
from .ingest import ObservationTable, SeasonDef, StationSet

log = logging.getLogger(__name__)

GRID_RESOLUTION = 0.4622
KRIGING_RIDGE = 1e-8
SPATIAL_VARS = {"lon", "lat", "elev"}


class CovariateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# basin grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasinGrid:
    lon: np.ndarray
    lat: np.ndarray
    elev: np.ndarray

    def __post_init__(self):
        if len(self.lon) == 0:
            raise CovariateError("basin grid is empty")

    def __len__(self):
        return len(self.lon)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lon": self.lon, "lat": self.lat, "elev": self.elev})

    def to_csv(self, path) -> None:
        self.frame().to_csv(path, index=False, float_format="%.10g")

    @classmethod
    def from_csv(cls, path) -> "BasinGrid":
        df = pd.read_csv(path, float_precision="round_trip")
        return cls(df["lon"].to_numpy(float), df["lat"].to_numpy(float), df["elev"].to_numpy(float))


def idw_elevation(lon, lat, stations: StationSet, power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted station elevation at the given points."""
    ref = stations.reference
    d = pairwise_distance(project_km(lon, lat, *ref), stations.coords_km(ref))
    exact = d < 1e-9
    w = 1.0 / np.maximum(d, 1e-9) ** power
    w[exact.any(axis=1)] = exact[exact.any(axis=1)]
    return (w @ stations.elev) / w.sum(axis=1)


def make_basin_grid(polygon, resolution: float = GRID_RESOLUTION,
                    stations: StationSet | None = None, elevation=None) -> BasinGrid:
    """Cell centres of a regular lon/lat grid that fall inside ``polygon``.

    ``polygon`` is a sequence of (lon, lat) vertices.  Elevation comes from
    ``elevation`` (a callable of lon, lat) or, failing that, from IDW of the
    station elevations.
    """
    poly = Polygon(polygon)
    if not poly.is_valid or poly.area <= 0:
        raise CovariateError("basin polygon is invalid or has zero area")
    x0, y0, x1, y1 = poly.bounds
    lons = np.arange(x0 + resolution / 2, x1, resolution)
    lats = np.arange(y0 + resolution / 2, y1, resolution)
    gl, ga = np.meshgrid(lons, lats)
    gl, ga = gl.ravel(), ga.ravel()
    inside = contains_xy(poly, gl, ga)
    gl, ga = gl[inside], ga[inside]
    if len(gl) == 0:
        raise CovariateError("no grid cell centre falls inside the basin polygon")
    if elevation is not None:
        elev = np.asarray(elevation(gl, ga), dtype=float)
    elif stations is not None:
        elev = idw_elevation(gl, ga, stations)
    else:
        raise CovariateError("grid elevation needs either an elevation function or stations")
    return BasinGrid(gl, ga, elev)


# ---------------------------------------------------------------------------
# kriging model
# ---------------------------------------------------------------------------


def _frame(lon, lat, elev, dates) -> pd.DataFrame:
    dates = pd.DatetimeIndex(dates)
    return pd.DataFrame({"lon": lon, "lat": lat, "elev": elev,
                         "doy": dates.dayofyear.to_numpy(float), "year": dates.year.to_numpy(float)})


def empirical_semivariogram(resid: np.ndarray, dist: np.ndarray, n_bins: int = 15) -> pd.DataFrame:
    """Binned semivariogram of residuals pooled over replicates (rows).

    ``resid`` is (n_days, K) with NaN for missing.  Pairs at distance zero
    form their own bin, which informs only the nugget.  Other pairs are
    binned on ``(0, max_distance / 2]``.
    """
    m = (~np.isnan(resid)).astype(float)
    r = np.where(m > 0, resid, 0.0)
    r2 = r * r
    ssq = r2.T @ m + m.T @ r2 - 2.0 * (r.T @ r)
    cnt = m.T @ m
    iu = np.triu_indices(len(dist), 1)
    d, s, n = dist[iu], ssq[iu], cnt[iu]
    keep = n > 0
    d, s, n = d[keep], s[keep], n[keep]
    rows = []
    zero = d <= 1e-9
    if np.any(zero):
        rows.append((0.0, 0.5 * s[zero].sum() / n[zero].sum(), n[zero].sum()))
    pos = ~zero
    if np.any(pos):
        edges = np.linspace(0.0, d[pos].max() / 2.0, n_bins + 1)
        idx = np.digitize(d[pos], edges[1:-1], right=True)
        inside = d[pos] <= edges[-1]
        for b in range(n_bins):
            sel = inside & (idx == b)
            nb = n[pos][sel].sum()
            if nb > 0:
                h = np.sum(d[pos][sel] * n[pos][sel]) / nb
                rows.append((h, 0.5 * s[pos][sel].sum() / nb, nb))
    return pd.DataFrame(rows, columns=["h", "gamma", "n"])


def fit_exponential_variogram(table: pd.DataFrame) -> tuple[float, float, float]:
    """Weighted least squares fit of ``tau2 + sigma2 * (1 - exp(-h / rho))``.

    Weights are the pair counts.  A tiny penalty on the nugget makes the
    split between nugget and sill well defined when the data cannot tell
    them apart (e.g. spatially white residuals).  Returns (sigma2, rho, tau2).
    """
    h, g, n = (table[c].to_numpy(float) for c in ("h", "gamma", "n"))
    if len(h) < 3:
        raise CovariateError("too few semivariogram bins to fit a covariance model")
    scale = float(np.average(g, weights=n))
    hpos = h[h > 0]
    w = np.sqrt(n / n.sum())

    def model(p):
        sigma2, rho, tau2 = np.exp(p)
        return tau2 + sigma2 * (1.0 - np.exp(-h / rho)) * (h > 0)

    def resid(p):
        return np.append(w * (g - model(p)) / scale, 1e-3 * np.exp(p[2]) / scale)

    lo = [np.log(1e-6 * scale), np.log(hpos.min() / 100.0), np.log(1e-8 * scale)]
    hi = [np.log(1e3 * scale), np.log(hpos.max() * 100.0), np.log(10.0 * scale)]
    x0 = [np.log(max(g.max() - g.min(), 0.5 * scale)), np.log(hpos.max() / 3.0), np.log(0.1 * g.min() + 1e-6 * scale)]
    x0 = np.clip(x0, lo, hi)
    res = least_squares(resid, x0, bounds=(lo, hi), xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=5000)
    if res.status <= 0:
        raise CovariateError(f"variogram fit did not converge: {res.message}")
    sigma2, rho, tau2 = np.exp(res.x)
    return float(sigma2), float(rho), float(tau2)


@dataclass
class KrigingModel:
    mean: PenalizedFit
    sigma2: float
    rho: float
    nugget: float
    reference: tuple
    variogram: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.rho > 0 and self.nugget >= 0):
            raise CovariateError("kriging covariance needs sigma2, rho > 0 and nugget >= 0")

    def covariance(self, d: np.ndarray, same: np.ndarray | None = None) -> np.ndarray:
        c = self.sigma2 * np.exp(-d / self.rho)
        if self.nugget:
            c = c + self.nugget * (d <= 1e-9 if same is None else same)
        return c

    def _parts(self, frame: pd.DataFrame, which: str) -> np.ndarray:
        out = np.zeros(len(frame))
        if which == "temporal" and self.mean.design.spec.intercept:
            out += self.mean.coefficients[0]
        for t in self.mean.design.terms:
            spatial = set(_term_vars(t.spec)) <= SPATIAL_VARS
            if spatial == (which == "spatial"):
                out += t(frame) @ self.mean.coefficients[t.columns]
        return out

    def spatial_mean(self, lon, lat, elev) -> np.ndarray:
        return self._parts(pd.DataFrame({"lon": lon, "lat": lat, "elev": elev}), "spatial")

    def temporal_mean(self, dates) -> np.ndarray:
        dates = pd.DatetimeIndex(dates)
        return self._parts(pd.DataFrame({"doy": dates.dayofyear.to_numpy(float),
                                         "year": dates.year.to_numpy(float)}), "temporal")

    def to_dict(self) -> dict:
        return {"mean": self.mean.to_dict(), "sigma2": self.sigma2, "rho": self.rho,
                "nugget": self.nugget, "reference": list(self.reference),
                "variogram": self.variogram.to_dict(orient="list"), "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d) -> "KrigingModel":
        return cls(PenalizedFit.from_dict(d["mean"]), d["sigma2"], d["rho"], d["nugget"],
                   tuple(d["reference"]), pd.DataFrame(d["variogram"]), d.get("metadata", {}))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "KrigingModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _term_vars(spec) -> list:
    return LinearPredictorSpec((spec,)).variables


def kriging_spec(year: bool = True, elevation: bool = True, n_basis: int = 10, n_tensor: int = 6):
    spec = canonical_spec(n_basis, n_tensor, covariate=None, year=year)
    if not elevation:
        spec = LinearPredictorSpec(tuple(t for t in spec.terms if t.name != "s(elev)"), spec.intercept)
    return spec


def fit_kriging_model(table: ObservationTable, stations: StationSet, year: bool = True,
                      elevation: bool = True, n_bins: int = 15, smoothing=None,
                      min_obs: int = 100) -> KrigingModel:
    """Fit the mean surface and the residual exponential covariance."""
    df = table.data.dropna(subset=["tavg"])
    if len(df) < min_obs:
        raise CovariateError(f"only {len(df)} temperature observations (need {min_obs})")
    idx = stations.index()
    k = df["id"].map(idx).to_numpy()
    frame = _frame(stations.lon[k], stations.lat[k], stations.elev[k], df["date"])
    spec = kriging_spec(year=year, elevation=elevation)
    try:
        mean = fit_gam(spec, frame, df["tavg"].to_numpy(float), "gaussian-identity", smoothing)
    except GamError as exc:
        raise CovariateError(f"mean model failed: {exc}") from exc
    resid = df["tavg"].to_numpy(float) - mean.eta(mean.design(frame))
    days, day_idx = np.unique(df["date"].to_numpy(), return_inverse=True)
    wide = np.full((len(days), len(stations)), np.nan)
    wide[day_idx, k] = resid
    ref = stations.reference
    vg = empirical_semivariogram(wide, pairwise_distance(stations.coords_km(ref)), n_bins)
    sigma2, rho, tau2 = fit_exponential_variogram(vg)
    meta = {"year_term": year, "elevation_term": elevation, "n_obs": int(len(df))}
    return KrigingModel(mean, sigma2, rho, tau2, ref, vg, meta)


def _solve(model: KrigingModel, c: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        return cho_solve(cho_factor(c), rhs), False
    except LinAlgError:
        ridge = KRIGING_RIDGE * max(float(np.max(np.diag(c))), 1.0)
        log.warning("singular kriging system of size %d; adding ridge %.1e", len(c), ridge)
        try:
            return cho_solve(cho_factor(c + ridge * np.eye(len(c))), rhs), True
        except LinAlgError as exc:
            raise CovariateError("kriging system singular even after ridge") from exc


def krige_day(model: KrigingModel, station_ids, values, stations: StationSet, grid: BasinGrid,
              date) -> np.ndarray:
    """Simple-kriging temperature surface on ``grid`` for one day."""
    values = np.asarray(values, dtype=float)
    ok = ~np.isnan(values)
    if not ok.any():
        raise CovariateError("no observations on this day")
    idx = stations.index()
    k = np.array([idx[s] for s in np.asarray(station_ids)[ok]])
    xy = stations.coords_km(model.reference)[k]
    gxy = project_km(grid.lon, grid.lat, *model.reference)
    t = model.temporal_mean([pd.Timestamp(date)])[0]
    resid = values[ok] - (model.spatial_mean(stations.lon[k], stations.lat[k], stations.elev[k]) + t)
    c = model.covariance(pairwise_distance(xy), np.eye(len(k), dtype=bool))
    w, _ = _solve(model, c, resid)
    cg = model.covariance(pairwise_distance(gxy, xy))
    return model.spatial_mean(grid.lon, grid.lat, grid.elev) + t + cg @ w


def basin_daily_means(model: KrigingModel, table: ObservationTable, stations: StationSet,
                      grid: BasinGrid) -> pd.Series:
    """Grid-averaged kriging surface for every calendar day in the table's range.

    Averaging is linear, so the grid mean of the kriging surface needs only
    the grid-averaged covariance vector and one solve per observation
    pattern.  Days without any observation fall back to the mean surface.
    """
    ids = list(stations.ids)
    wide = table.pivot("tavg", ids)
    dates = pd.date_range(wide.index.min(), wide.index.max(), freq="D")
    vals = wide.reindex(dates).to_numpy(float)
    xy = stations.coords_km(model.reference)
    gxy = project_km(grid.lon, grid.lat, *model.reference)
    spatial_st = model.spatial_mean(stations.lon, stations.lat, stations.elev)
    spatial_bar = float(np.mean(model.spatial_mean(grid.lon, grid.lat, grid.elev)))
    temporal = model.temporal_mean(dates)
    cbar = model.covariance(pairwise_distance(gxy, xy)).mean(axis=0)
    c_all = model.covariance(pairwise_distance(xy), np.eye(len(ids), dtype=bool))
    resid = vals - spatial_st[None, :] - temporal[:, None]
    mask = ~np.isnan(vals)
    out = spatial_bar + temporal
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = np.ravel(inverse)
    n_ridge = 0
    for p, pat in enumerate(patterns):
        if not pat.any():
            continue
        obs = np.flatnonzero(pat)
        w, ridged = _solve(model, c_all[np.ix_(obs, obs)], cbar[obs])
        n_ridge += ridged
        rows = np.flatnonzero(inverse == p)
        out[rows] += resid[np.ix_(rows, obs)] @ w
    if n_ridge:
        log.warning("%d observation patterns needed a ridge", n_ridge)
    return pd.Series(out, index=dates, name="basin_mean")


# ---------------------------------------------------------------------------
# covariate series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateSeries:
    """Standardized covariate; ``raw = values * sd + mean`` is the smoothed basin temperature."""

    dates: pd.DatetimeIndex
    values: np.ndarray
    mean: float
    sd: float
    metadata: dict = field(default_factory=dict)

    @property
    def raw(self) -> np.ndarray:
        return self.values * self.sd + self.mean

    @property
    def constants(self) -> dict:
        return {"mean": self.mean, "sd": self.sd}

    def series(self) -> pd.Series:
        return pd.Series(self.values, index=self.dates, name="value")

    def lookup(self, dates) -> np.ndarray:
        s = self.series()
        dates = pd.DatetimeIndex(dates)
        missing = ~dates.isin(s.index)
        if missing.any():
            raise KeyError(f"covariate undefined on {dates[missing][0].date()}")
        return s.reindex(dates).to_numpy()

    def to_csv(self, path) -> None:
        pd.DataFrame({"date": self.dates.strftime("%Y-%m-%d"), "value": self.values}).to_csv(
            path, index=False, float_format="%.17g")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"mean": self.mean, "sd": self.sd, "metadata": self.metadata}, fh,
                      indent=1, sort_keys=True)

    @classmethod
    def load(cls, csv_path, json_path) -> "CovariateSeries":
        df = pd.read_csv(csv_path, float_precision="round_trip")
        with open(json_path) as fh:
            meta = json.load(fh)
        return cls(pd.DatetimeIndex(pd.to_datetime(df["date"])), df["value"].to_numpy(float),
                   meta["mean"], meta["sd"], meta.get("metadata", {}))


def smooth_trailing(daily: pd.Series, window: int = 30) -> pd.Series:
    """Mean over the ``window`` days ending at each day (shorter at the start)."""
    if window > len(daily):
        raise CovariateError(f"window of {window} days exceeds the {len(daily)}-day series")
    return daily.rolling(window, min_periods=1).mean()


def standardize(raw: pd.Series, training=None, metadata=None) -> CovariateSeries:
    train = raw if training is None else raw.loc[pd.Timestamp(training[0]):pd.Timestamp(training[1])]
    if len(train) < 2:
        raise CovariateError("training period has fewer than two days")
    m = float(train.mean())
    v = float(train.std(ddof=1))
    if not v > 1e-12 * max(abs(m), 1.0):
        raise CovariateError("covariate has zero variance over the training period")
    return CovariateSeries(pd.DatetimeIndex(raw.index), (raw.to_numpy(float) - m) / v, m, v,
                           dict(metadata or {}))


def covariate_from_daily(daily: pd.Series, window: int = 30, training=None, metadata=None) -> CovariateSeries:
    return standardize(smooth_trailing(daily, window), training,
                       dict(metadata or {}, window=window,
                            training=None if training is None else [str(t) for t in training]))


def build_covariate(model: KrigingModel, table: ObservationTable, stations: StationSet,
                    grid: BasinGrid, window: int = 30, training=None) -> CovariateSeries:
    daily = basin_daily_means(model, table, stations, grid)
    return covariate_from_daily(daily, window, training, {"grid_points": len(grid)})


def gcm_basin_series(table: ObservationTable, stations: StationSet, grid: BasinGrid,
                     window: int = 30, smoothing=None) -> tuple[pd.Series, KrigingModel]:
    """Smoothed (unstandardized) basin temperature from climate-model pseudo-stations.

    The mean model drops the year spline (it cannot be extrapolated) and is
    refitted on the model output itself.  Grid-cell elevation is not part of
    the climate-model output, so the elevation term is dropped as well.
    """
    model = fit_kriging_model(table, stations, year=False, elevation=False, smoothing=smoothing)
    model.metadata["gcm_mean_refit"] = True
    return smooth_trailing(basin_daily_means(model, table, stations, grid), window), model


# ---------------------------------------------------------------------------
# climate-model scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSeries:
    gcm: str
    scenario: str
    dates: pd.DatetimeIndex
    raw: np.ndarray
    offsets: dict
    mean: float
    sd: float
    metadata: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return (self.raw - self.mean) / self.sd

    @property
    def constants(self) -> dict:
        return {"mean": self.mean, "sd": self.sd}

    def series(self) -> pd.Series:
        return pd.Series(self.values, index=self.dates, name="value")

    def to_csv(self, path) -> None:
        pd.DataFrame({"date": self.dates.strftime("%Y-%m-%d"), "value": self.values}).to_csv(
            path, index=False, float_format="%.17g")

    def to_json(self, path) -> None:
        doc = {"gcm": self.gcm, "scenario": self.scenario, "offsets": self.offsets,
               "mean": self.mean, "sd": self.sd, "metadata": self.metadata}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, csv_path, json_path) -> "ScenarioSeries":
        df = pd.read_csv(csv_path, float_precision="round_trip")
        with open(json_path) as fh:
            d = json.load(fh)
        raw = df["value"].to_numpy(float) * d["sd"] + d["mean"]
        return cls(d["gcm"], d["scenario"], pd.DatetimeIndex(pd.to_datetime(df["date"])), raw,
                   d["offsets"], d["mean"], d["sd"], d.get("metadata", {}))


def debias_gcm(gcm: pd.Series, observed: CovariateSeries, seasons: SeasonDef | None = None,
               label: str = "GCM", scenario: str = "", gcm_years=(2015, 2020),
               obs_years=(2010, 2015), start=None) -> ScenarioSeries:
    """Subtract per-season mean differences between model and observations.

    ``gcm`` is the smoothed basin temperature of one climate model in °C.
    Offsets compare ``gcm_years`` of the model with ``obs_years`` of the
    observed (unstandardized) series; the result keeps the observed
    standardization constants.
    """
    seasons = seasons or SeasonDef()
    gcm = gcm.sort_index()
    g_season = seasons(gcm.index)
    o_season = seasons(observed.dates)
    g_years = gcm.index.year
    o_years = observed.dates.year
    g_in = (g_years >= gcm_years[0]) & (g_years <= gcm_years[1])
    o_in = (o_years >= obs_years[0]) & (o_years <= obs_years[1])
    obs_raw = observed.raw
    offsets = {}
    for s in seasons.labels:
        gs = g_in & (g_season == s)
        os_ = o_in & (o_season == s)
        if not gs.any() or not os_.any():
            raise CovariateError(f"no {s} data in the debiasing periods")
        offsets[s] = float(gcm.to_numpy()[gs].mean() - obs_raw[os_].mean())
    shift = np.array([offsets[s] for s in g_season])
    debiased = gcm.to_numpy(float) - shift
    keep = np.ones(len(gcm), bool) if start is None else gcm.index >= pd.Timestamp(start)
    return ScenarioSeries(label, scenario, pd.DatetimeIndex(gcm.index[keep]), debiased[keep], offsets,
                          observed.mean, observed.sd,
                          {"gcm_years": list(gcm_years), "obs_years": list(obs_years)})


def average_scenarios(members: list, label: str = "AVG") -> ScenarioSeries:
    """Pointwise mean of debiased temperatures across climate models."""
    if not members:
        raise CovariateError("nothing to average")
    first = members[0]
    for m in members[1:]:
        if m.scenario != first.scenario:
            raise CovariateError(f"cannot average scenarios {first.scenario} and {m.scenario}")
        if len(m.dates) != len(first.dates) or not (m.dates == first.dates).all():
            raise CovariateError(f"{m.gcm} and {first.gcm} cover different date ranges")
        if (m.mean, m.sd) != (first.mean, first.sd):
            raise CovariateError("members use different standardization constants")
    raw = np.mean([m.raw for m in members], axis=0)
    offsets = {s: float(np.mean([m.offsets[s] for m in members])) for s in first.offsets}
    return ScenarioSeries(label, first.scenario, first.dates, raw, offsets, first.mean, first.sd,
                          {"members": [m.gcm for m in members]})
