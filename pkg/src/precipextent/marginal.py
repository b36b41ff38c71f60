"""Three-step marginal model for daily precipitation above a hard floor.

Given ``Y > floor`` (10 mm by default):

* the excess ``Y - floor`` is Gamma with mean ``exp(eta_gam)`` and a global shape;
* ``u = floor + q90`` where ``q90`` is the fitted Gamma 90% quantile of the excess;
* ``p = pr(Y > u | Y > floor)`` is logistic in ``eta_log``;
* ``Y - u | Y > u`` is generalized Pareto with scale ``u * exp(eta_gp)`` and a global shape.

The pieces are glued into one conditional distribution function: below
``u`` the Gamma cdf is rescaled to carry mass ``1 - p``, above ``u`` the
survival is ``p`` times the GP survival.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import gamma as gamma_dist
from scipy.stats import kstest

from .covariate import CovariateSeries
from .gam import (PenalizedFit, canonical_spec, fit_gam, fit_gp_gam, gamma_shape_mle,
                  gp_quantile, gp_survival)
from .ingest import ObservationTable, SeasonDef, StationSet

log = logging.getLogger(__name__)

FLOOR_MM = 10.0
BULK_QUANTILE = 0.9
MIN_EXCEEDANCES = 30


class MarginalError(ValueError):
    pass


@dataclass
class MarginalModel:
    gamma_fit: PenalizedFit
    kappa: float
    logistic_fit: PenalizedFit
    gp_fit: PenalizedFit
    stations: pd.DataFrame
    floor: float = FLOOR_MM
    bulk_quantile: float = BULK_QUANTILE
    covariate: str = "temp"
    report: dict = field(default_factory=dict)

    @property
    def xi(self) -> float:
        return float(self.gp_fit.extra["xi"])

    @property
    def betas(self) -> dict:
        """Covariate slope of each linear predictor."""
        return {name: fit.coefficient(self.covariate) for name, fit in
                (("gamma", self.gamma_fit), ("logistic", self.logistic_fit), ("gp", self.gp_fit))}

    # -- conditions ---------------------------------------------------------

    def frame(self, station_ids, dates, temp) -> pd.DataFrame:
        """Covariate table for (station, date, temp) triples (broadcast)."""
        st = self.stations.set_index("id")
        ids, dates, temp = np.broadcast_arrays(np.asarray(station_ids, dtype=object),
                                               np.asarray(dates, dtype="datetime64[ns]"),
                                               np.asarray(temp, dtype=float))
        ids, dates, temp = ids.ravel(), dates.ravel(), temp.ravel()
        unknown = set(ids) - set(st.index)
        if unknown:
            raise MarginalError(f"unknown station(s) {sorted(unknown)[:5]}")
        rows = st.loc[ids]
        return pd.DataFrame({"lon": rows["lon"].to_numpy(), "lat": rows["lat"].to_numpy(),
                             "elev": rows["elev"].to_numpy(),
                             "doy": pd.DatetimeIndex(dates).dayofyear.to_numpy(float),
                             self.covariate: temp})

    def parameters(self, frame: pd.DataFrame) -> dict:
        """Mean, threshold, exceedance probability and GP scale for each row."""
        mu = np.exp(self.gamma_fit.eta(self.gamma_fit.design(frame)))
        q = gamma_dist.ppf(self.bulk_quantile, self.kappa, scale=mu / self.kappa)
        u = self.floor + q
        p = 1.0 / (1.0 + np.exp(-self.logistic_fit.eta(self.logistic_fit.design(frame))))
        sigma = u * np.exp(self.gp_fit.eta(self.gp_fit.design(frame)))
        return {"mu": mu, "u": u, "p": p, "sigma": sigma}

    # -- distribution -------------------------------------------------------

    def _cdf_sf(self, frame: pd.DataFrame, y):
        y = np.asarray(y, dtype=float)
        if np.any(~(y > self.floor)):
            raise MarginalError(f"the distribution is defined for y > {self.floor} mm only")
        par = self.parameters(frame)
        u, p = par["u"], par["p"]
        body = (1.0 - p) * gamma_dist.cdf(y - self.floor, self.kappa, scale=par["mu"] / self.kappa) \
            / self.bulk_quantile
        body = np.minimum(body, 1.0 - p)
        tail_sf = p * gp_survival(np.maximum(y - u, 0.0), par["sigma"], self.xi)
        below = y <= u
        return np.where(below, body, 1.0 - tail_sf), np.where(below, 1.0 - body, tail_sf)

    def cdf(self, frame: pd.DataFrame, y) -> np.ndarray:
        """``pr(Y <= y | Y > floor)`` for ``y > floor``."""
        return self._cdf_sf(frame, y)[0]

    def survival(self, frame: pd.DataFrame, y) -> np.ndarray:
        """``pr(Y > y | Y > floor)``, computed without cancellation in the tail."""
        return self._cdf_sf(frame, y)[1]

    def quantile(self, frame: pd.DataFrame, prob) -> np.ndarray:
        """Inverse of :meth:`cdf`."""
        prob = np.asarray(prob, dtype=float)
        par = self.parameters(frame)
        p = par["p"]
        lower = prob <= 1.0 - p
        level = np.clip(prob * self.bulk_quantile / (1.0 - p), 0.0, self.bulk_quantile)
        body = self.floor + gamma_dist.ppf(level, self.kappa, scale=par["mu"] / self.kappa)
        tail_p = np.clip(1.0 - (1.0 - prob) / p, 0.0, 1.0)
        tail = par["u"] + gp_quantile(tail_p, par["sigma"], self.xi)
        return np.where(lower, body, tail)

    def simulate(self, frame: pd.DataFrame, rng: np.random.Generator) -> np.ndarray:
        """One draw of ``Y | Y > floor`` per row."""
        return self.quantile(frame, rng.uniform(size=len(frame)))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {"gamma": self.gamma_fit.to_dict(), "kappa": self.kappa,
                "logistic": self.logistic_fit.to_dict(), "gp": self.gp_fit.to_dict(),
                "stations": self.stations.to_dict(orient="list"), "floor": self.floor,
                "bulk_quantile": self.bulk_quantile, "covariate": self.covariate,
                "report": self.report}

    @classmethod
    def from_dict(cls, d) -> "MarginalModel":
        return cls(PenalizedFit.from_dict(d["gamma"]), d["kappa"], PenalizedFit.from_dict(d["logistic"]),
                   PenalizedFit.from_dict(d["gp"]), pd.DataFrame(d["stations"]), d["floor"],
                   d["bulk_quantile"], d["covariate"], d.get("report", {}))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "MarginalModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _wet_rows(table: ObservationTable, covariate: CovariateSeries, floor: float) -> pd.DataFrame:
    df = table.data
    df = df[df["prcp"] > floor]
    if df.empty:
        raise MarginalError(f"no observations above {floor} mm: empty bulk sample")
    return df.assign(temp=covariate.lookup(df["date"]))


def fit_marginal(table: ObservationTable, stations: StationSet, covariate: CovariateSeries,
                 floor: float = FLOOR_MM, bulk_quantile: float = BULK_QUANTILE,
                 seasons: SeasonDef | None = None, min_exceedances: int = MIN_EXCEEDANCES,
                 smoothing=None, spec=None) -> MarginalModel:
    """Fit the Gamma bulk, the logistic exceedance model and the GP tail."""
    seasons = seasons or SeasonDef()
    wet = _wet_rows(table, covariate, floor)
    st = stations.to_frame()
    model = MarginalModel(None, 1.0, None, None, st, floor, bulk_quantile)
    frame = model.frame(wet["id"].to_numpy(), wet["date"].to_numpy(), wet["temp"].to_numpy())
    spec = spec or canonical_spec()
    y = wet["prcp"].to_numpy(float)

    model.gamma_fit = fit_gam(spec, frame, y - floor, "gamma-log", smoothing)
    mu = np.exp(model.gamma_fit.eta(model.gamma_fit.design(frame)))
    model.kappa = gamma_shape_mle(y - floor, mu)
    u = floor + gamma_dist.ppf(bulk_quantile, model.kappa, scale=mu / model.kappa)

    exceed = y > u
    labels = seasons(wet["date"])
    counts = {s: int(np.sum(exceed & (labels == s))) for s in seasons.labels}
    short = {s: c for s, c in counts.items() if c < min_exceedances}
    if short:
        raise MarginalError(f"too few threshold exceedances per season: {short} (need {min_exceedances})")
    model.logistic_fit = fit_gam(spec, frame, exceed.astype(float), "binomial-logit", smoothing)
    model.gp_fit = fit_gp_gam(spec, frame.loc[exceed], y[exceed] - u[exceed], u[exceed], smoothing)
    model.report = {"n_wet": int(len(y)), "n_exceed": int(exceed.sum()), "exceedances_by_season": counts,
                    "kappa": model.kappa, "xi": model.xi}
    log.info("marginal fit: %d wet days, %d exceedances, kappa %.3f, xi %.3f",
             len(y), exceed.sum(), model.kappa, model.xi)
    return model


def return_level(model: MarginalModel, frame: pd.DataFrame, q) -> np.ndarray:
    """Level exceeded with probability ``q`` given ``Y > floor``.

    ``u + GP^{-1}(1 - q / p)``; ``u`` already includes the floor.
    """
    q = np.asarray(q, dtype=float)
    if np.any(q >= 0.1) or np.any(q <= 0):
        raise MarginalError("return levels need an exceedance probability in (0, 0.1)")
    par = model.parameters(frame)
    if np.any(q > par["p"] * (1.0 + 1e-12)):
        raise MarginalError("exceedance probability above the threshold rate; level would lie "
                            "below the threshold (unsupported)")
    return par["u"] + gp_quantile(np.maximum(1.0 - q / par["p"], 0.0), par["sigma"], model.xi)


# ---------------------------------------------------------------------------
# Pareto scale
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoField:
    """Unit-Pareto values per (day, station); NaN where non-informative or missing."""

    station_ids: tuple
    coords_km: np.ndarray
    dates: np.ndarray
    temp: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        v = self.values[~np.isnan(self.values)]
        if np.any(v < 1.0):
            raise ValueError("unit-Pareto values must be >= 1")

    def to_frame(self) -> pd.DataFrame:
        day, k = np.nonzero(~np.isnan(self.values))
        return pd.DataFrame({"station": np.asarray(self.station_ids, dtype=object)[k],
                             "date": pd.DatetimeIndex(self.dates[day]).strftime("%Y-%m-%d"),
                             "value": self.values[day, k]})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, stations: StationSet, covariate: CovariateSeries, dates=None) -> "ParetoField":
        df = pd.read_csv(path, dtype={"station": str}, float_precision="round_trip")
        day = pd.to_datetime(df["date"])
        dates = pd.DatetimeIndex(sorted(set(day)) if dates is None else dates)
        values = np.full((len(dates), len(stations)), np.nan)
        values[dates.get_indexer(day), df["station"].map(stations.index()).to_numpy()] = df["value"]
        return cls(stations.ids, stations.coords_km(), dates.to_numpy(), covariate.lookup(dates), values)


def to_unit_pareto(model: MarginalModel, table: ObservationTable, stations: StationSet,
                   covariate: CovariateSeries) -> ParetoField:
    """``1 / (1 - F(y))`` for ``y > floor``; other cells are missing."""
    df = table.data
    dates = pd.DatetimeIndex(np.unique(df["date"]))
    values = np.full((len(dates), len(stations)), np.nan)
    wet = df[df["prcp"] > model.floor]
    if len(wet):
        temp = covariate.lookup(wet["date"])
        fr = model.frame(wet["id"].to_numpy(), wet["date"].to_numpy(), temp)
        surv = model.survival(fr, wet["prcp"].to_numpy(float))
        values[dates.get_indexer(wet["date"]), wet["id"].map(stations.index()).to_numpy()] = 1.0 / surv
    return ParetoField(stations.ids, stations.coords_km(), dates.to_numpy(), covariate.lookup(dates), values)


def from_unit_pareto(model: MarginalModel, frame: pd.DataFrame, y_pareto) -> np.ndarray:
    """Back-transform unit-Pareto values to millimetres."""
    return model.quantile(frame, 1.0 - 1.0 / np.asarray(y_pareto, dtype=float))


def qq_pairs(prob) -> pd.DataFrame:
    prob = np.sort(np.asarray(prob, dtype=float))
    n = len(prob)
    return pd.DataFrame({"theoretical": (np.arange(1, n + 1) - 0.5) / n, "empirical": prob})


def qq_export(model: MarginalModel, table: ObservationTable, covariate: CovariateSeries,
              station_ids=None, path=None) -> pd.DataFrame:
    """Uniform-scale QQ pairs, pooled and per station."""
    wet = _wet_rows(table, covariate, model.floor)
    if station_ids is not None:
        wet = wet[wet["id"].isin(list(station_ids))]
    fr = model.frame(wet["id"].to_numpy(), wet["date"].to_numpy(), wet["temp"].to_numpy())
    prob = model.cdf(fr, wet["prcp"].to_numpy(float))
    parts = [qq_pairs(prob).assign(station="pooled")]
    ids = wet["id"].to_numpy()
    for s in dict.fromkeys(ids):
        parts.append(qq_pairs(prob[ids == s]).assign(station=s))
    out = pd.concat(parts, ignore_index=True)[["station", "theoretical", "empirical"]]
    if path is not None:
        out.to_csv(path, index=False, float_format="%.10g")
    return out


def ks_uniform(prob) -> float:
    """Kolmogorov-Smirnov distance of ``prob`` from the uniform law."""
    return float(kstest(np.asarray(prob, dtype=float), "uniform").statistic)

