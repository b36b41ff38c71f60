"""Station metadata and daily observations: loading, validation, summaries.

CSV schemas (UTF-8, ``.`` decimal separator, empty cell = missing)::

    stations:      id,lon,lat,elev
    observations:  id,date,prcp,tavg      (date is ISO-8601 YYYY-MM-DD)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd
from scipy.special import expit, ndtr
from scipy.stats import gamma as gamma_dist

from .geo import pairwise_distance, project_km

log = logging.getLogger(__name__)

SEASONS = ("Winter", "Spring", "Summer", "Fall")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class Station:
    id: str
    lon: float
    lat: float
    elev: float

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise IngestError(f"station {self.id}: longitude {self.lon} out of range")
        if not -90.0 <= self.lat <= 90.0:
            raise IngestError(f"station {self.id}: latitude {self.lat} out of range")


@dataclass(frozen=True)
class StationSet:
    stations: tuple

    def __post_init__(self):
        ids = [s.id for s in self.stations]
        dup = pd.Index(ids)[pd.Index(ids).duplicated()]
        if len(dup):
            raise IngestError(f"duplicate station id(s): {sorted(set(dup))}")

    def __len__(self):
        return len(self.stations)

    def __iter__(self) -> Iterator[Station]:
        return iter(self.stations)

    def __getitem__(self, i) -> Station:
        return self.stations[i]

    @property
    def ids(self) -> tuple:
        return tuple(s.id for s in self.stations)

    @property
    def lon(self) -> np.ndarray:
        return np.array([s.lon for s in self.stations])

    @property
    def lat(self) -> np.ndarray:
        return np.array([s.lat for s in self.stations])

    @property
    def elev(self) -> np.ndarray:
        return np.array([s.elev for s in self.stations])

    @property
    def reference(self) -> tuple[float, float]:
        """Projection centre used for all planar distances of this network."""
        return float(np.mean(self.lon)), float(np.mean(self.lat))

    def coords_km(self, reference: tuple[float, float] | None = None) -> np.ndarray:
        lon0, lat0 = reference or self.reference
        return project_km(self.lon, self.lat, lon0, lat0)

    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.ids)}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"id": self.ids, "lon": self.lon, "lat": self.lat, "elev": self.elev})


@dataclass(frozen=True)
class ObservationTable:
    """Daily observations; ``data`` has columns id, date, prcp, tavg."""

    data: pd.DataFrame = field(repr=False)

    def __len__(self):
        return len(self.data)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(self.data["date"])

    def subset(self, mask) -> "ObservationTable":
        return ObservationTable(self.data.loc[np.asarray(mask)].reset_index(drop=True))

    def pivot(self, variable: str, station_ids=None) -> pd.DataFrame:
        """Wide (date x station) matrix of one variable; absent cells are NaN."""
        wide = self.data.pivot(index="date", columns="id", values=variable)
        if station_ids is not None:
            wide = wide.reindex(columns=list(station_ids))
        return wide


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------


def _read_csv(path, header: list[str]) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if list(df.columns) != header:
        raise IngestError(f"{path}: expected header {','.join(header)}, got {','.join(df.columns)}")
    return df


def _to_float(col: pd.Series, name: str, path, allow_missing: bool) -> np.ndarray:
    s = col.str.strip()
    missing = s == ""
    if missing.any() and not allow_missing:
        raise IngestError(f"{path}: empty {name} at row(s) {list(np.flatnonzero(missing)[:5] + 2)}")
    out = pd.to_numeric(s.where(~missing), errors="coerce")
    bad = out.isna() & ~missing
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IngestError(f"{path}: cannot parse {name} {col.iloc[i]!r} at row {i + 2}")
    return out.to_numpy(dtype=float)


def load_stations(path) -> StationSet:
    df = _read_csv(path, ["id", "lon", "lat", "elev"])
    cols = {c: _to_float(df[c], c, path, allow_missing=False) for c in ("lon", "lat", "elev")}
    return StationSet(tuple(Station(str(i), float(lo), float(la), float(el))
                            for i, lo, la, el in zip(df["id"], cols["lon"], cols["lat"], cols["elev"])))


def save_stations(stations: StationSet, path) -> None:
    stations.to_frame().to_csv(path, index=False)


def load_observations(path, stations: StationSet) -> ObservationTable:
    df = _read_csv(path, ["id", "date", "prcp", "tavg"])
    unknown = sorted(set(df["id"]) - set(stations.ids))
    if unknown:
        raise IngestError(f"{path}: unknown station id(s) {unknown[:5]}")
    dates = pd.to_datetime(df["date"], format="%Y-%m-%d", errors="coerce")
    if dates.isna().any():
        i = int(np.flatnonzero(dates.isna())[0])
        raise IngestError(f"{path}: malformed date {df['date'].iloc[i]!r} at row {i + 2}")
    prcp = _to_float(df["prcp"], "prcp", path, allow_missing=True)
    if np.any(prcp < 0):
        i = int(np.flatnonzero(prcp < 0)[0])
        raise IngestError(f"{path}: negative precipitation at row {i + 2}")
    tavg = _to_float(df["tavg"], "tavg", path, allow_missing=True)
    out = pd.DataFrame({"id": df["id"].to_numpy(), "date": dates.to_numpy(), "prcp": prcp, "tavg": tavg})
    dup = out.duplicated(["id", "date"])
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise IngestError(f"{path}: duplicate (station, date) at row {i + 2}")
    return ObservationTable(out)


def save_observations(table: ObservationTable, path) -> None:
    df = table.data.copy()
    df["date"] = pd.DatetimeIndex(df["date"]).strftime("%Y-%m-%d")
    df.to_csv(path, index=False, na_rep="")


# ---------------------------------------------------------------------------
# exploratory summaries
# ---------------------------------------------------------------------------


def _thresholded_mean(df: pd.DataFrame, key: pd.Series, variable: str, min_count: int) -> pd.DataFrame:
    g = df.assign(_key=key.to_numpy()).groupby(["_key", "id"])[variable]
    mean = g.mean().unstack("id")
    count = g.count().unstack("id")
    return mean.where(count >= min_count)


def daily_mean_over_years(table: ObservationTable, min_count: int = 10, variable: str = "prcp") -> pd.DataFrame:
    """Mean over years per (day of year, station); NaN with fewer than ``min_count`` values."""
    df = table.data
    out = _thresholded_mean(df, pd.DatetimeIndex(df["date"]).dayofyear.to_series(), variable, min_count)
    out.index.name = "doy"
    return out


def annual_mean(table: ObservationTable, min_count: int = 20, variable: str = "prcp") -> pd.DataFrame:
    """Mean per (year, station); NaN with fewer than ``min_count`` values."""
    df = table.data
    out = _thresholded_mean(df, pd.DatetimeIndex(df["date"]).year.to_series(), variable, min_count)
    out.index.name = "year"
    return out


# ---------------------------------------------------------------------------
# seasons
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeasonDef:
    """Month -> season label.  Default is meteorological DJF/MAM/JJA/SON."""

    months: Mapping[int, str] = field(default_factory=lambda: {
        12: "Winter", 1: "Winter", 2: "Winter", 3: "Spring", 4: "Spring", 5: "Spring",
        6: "Summer", 7: "Summer", 8: "Summer", 9: "Fall", 10: "Fall", 11: "Fall"})

    def __post_init__(self):
        if sorted(self.months) != list(range(1, 13)):
            raise ValueError("season definition must cover all 12 months exactly once")

    @property
    def labels(self) -> tuple:
        return tuple(dict.fromkeys(self.months[m] for m in (12,) + tuple(range(1, 12))))

    def __call__(self, dates) -> np.ndarray:
        months = pd.DatetimeIndex(dates).month
        return np.array([self.months[m] for m in months], dtype=object)

    def to_dict(self) -> dict:
        return {str(k): v for k, v in sorted(self.months.items())}

    @classmethod
    def from_dict(cls, d) -> "SeasonDef":
        return cls({int(k): str(v) for k, v in d.items()})


def split_by_season(table: ObservationTable, seasons: SeasonDef | None = None) -> dict:
    seasons = seasons or SeasonDef()
    labels = seasons(table.data["date"]) if len(table) else np.array([], dtype=object)
    return {s: table.subset(labels == s) for s in seasons.labels}


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Settings for the synthetic basin generator.

    Precipitation on a wet-enough day follows the three-part model used for
    fitting: conditional on exceeding ``floor`` mm, the excess is Gamma below
    the Gamma 90% quantile and generalized Pareto (shape ``xi``) above it,
    with probability ``p_tail`` of landing in the tail.  Sub-floor amounts
    are zero (dry) or uniform on (0, floor).  A latent Gaussian field with
    exponential correlation (range ``dep_range_km``) couples the stations.
    Temperature is a seasonal sinusoid with a lapse-rate elevation effect,
    an AR(1) anomaly field with exponential spatial correlation (range
    ``temp_range_km``) and station noise; the local anomaly also shifts
    the Gamma mean so precipitation responds to temperature.
    """

    n_stations: int = 25
    start: str = "1990-01-01"
    end: str = "1999-12-31"
    missing_fraction: float = 0.3
    seed: int = 1
    lon_range: tuple = (9.0, 17.0)
    lat_range: tuple = (45.0, 50.0)
    elev_range: tuple = (100.0, 1500.0)
    floor: float = 10.0
    p_exceed: float = 0.12
    p_dry: float = 0.5
    gamma_shape: float = 0.9
    p_tail: float = 0.1
    xi: float = 0.12
    gp_log_scale: float = -1.3
    dep_range_km: float = 250.0
    temp_range_km: float = 800.0
    temp_effect: float = 0.08

    def __post_init__(self):
        if self.n_stations < 1:
            raise ValueError("n_stations must be positive")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if pd.Timestamp(self.end) < pd.Timestamp(self.start):
            raise ValueError("end date precedes start date")
        if not 0 < self.p_exceed < 1 or not 0 <= self.p_dry < 1 - self.p_exceed:
            raise ValueError("invalid wet/dry probabilities")


def _correlated_ar1(rng, n: int, corr: np.ndarray, phi: float, sd: float) -> np.ndarray:
    """Stationary AR(1) series at K sites with spatially correlated innovations."""
    chol = np.linalg.cholesky(corr + 1e-10 * np.eye(len(corr)))
    eps = rng.standard_normal((n, len(corr))) @ chol.T
    out = np.empty_like(eps)
    out[0] = sd * eps[0]
    innov = sd * np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + innov * eps[t]
    return out


def _composite_quantile(v, mean, cfg: SyntheticConfig):
    """Quantile of ``Y - floor`` given ``Y > floor`` at conditional level ``v``."""
    scale = mean / cfg.gamma_shape
    q90 = gamma_dist.ppf(1.0 - cfg.p_tail, cfg.gamma_shape, scale=scale)
    body = gamma_dist.ppf(np.clip(v, 0, 1 - cfg.p_tail), cfg.gamma_shape, scale=scale)
    u = cfg.floor + q90
    sigma = u * np.exp(cfg.gp_log_scale)
    tail_p = np.clip((v - (1 - cfg.p_tail)) / cfg.p_tail, 0, 1 - 1e-15)
    tail = q90 + sigma * np.expm1(-cfg.xi * np.log1p(-tail_p)) / cfg.xi
    return np.where(v <= 1 - cfg.p_tail, body, tail)


def synthetic_stations(cfg: SyntheticConfig, rng: np.random.Generator) -> StationSet:
    lon = np.round(rng.uniform(*cfg.lon_range, cfg.n_stations), 4)
    lat = np.round(rng.uniform(*cfg.lat_range, cfg.n_stations), 4)
    elev = np.round(rng.uniform(*cfg.elev_range, cfg.n_stations), 1)
    return StationSet(tuple(Station(f"ST{i:04d}", float(a), float(b), float(c))
                            for i, (a, b, c) in enumerate(zip(lon, lat, elev))))


def generate_synthetic(config: SyntheticConfig | None = None) -> tuple[StationSet, ObservationTable]:
    """Reproducible synthetic stations and daily observations."""
    cfg = config or SyntheticConfig()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    stations = synthetic_stations(cfg, rng)
    dates = pd.date_range(cfg.start, cfg.end, freq="D")
    n, k = len(dates), len(stations)
    doy = dates.dayofyear.to_numpy()
    years = dates.year.to_numpy() - dates.year[0]
    season = np.sin(2 * np.pi * (doy - 105) / 365.25)

    xy = project_km(stations.lon, stations.lat)
    dist = pairwise_distance(xy)
    anomaly = _correlated_ar1(rng, n, np.exp(-dist / cfg.temp_range_km), 0.8, 2.0)
    elev = stations.elev
    lat_c = stations.lat - np.mean(stations.lat)
    tavg = (10.0 - 6.5 * elev / 1000.0 - 0.6 * lat_c)[None, :] + 9.0 * season[:, None] \
        + 0.03 * years[:, None] + anomaly + rng.normal(0.0, 0.5, (n, k))

    chol = np.linalg.cholesky(np.exp(-dist / cfg.dep_range_km) + 1e-10 * np.eye(k))
    z = rng.standard_normal((n, k)) @ chol.T
    uni = ndtr(z)
    elev_std = (elev - elev.mean()) / (elev.std() + 1e-12)
    wet_season = np.sin(2 * np.pi * (doy - 200) / 365.25)
    logit_p = np.log(cfg.p_exceed / (1 - cfg.p_exceed)) + 0.4 * wet_season[:, None] + 0.2 * elev_std[None, :]
    p10 = expit(logit_p)
    p_dry = cfg.p_dry * (1 - p10) / (1 - cfg.p_exceed)
    mean = np.exp(1.6 + 0.25 * wet_season[:, None] + 0.1 * elev_std[None, :]
                  + cfg.temp_effect * anomaly)
    prcp = np.zeros((n, k))
    low = (uni >= p_dry) & (uni < 1 - p10)
    prcp[low] = cfg.floor * (uni[low] - p_dry[low]) / (1 - p10[low] - p_dry[low])
    high = uni >= 1 - p10
    v = (uni[high] - (1 - p10[high])) / p10[high]
    prcp[high] = cfg.floor + _composite_quantile(v, mean[high], cfg)
    # keep rounded values strictly above the floor when the latent value was
    prcp = np.round(prcp, 2)
    prcp[high] = np.maximum(prcp[high], cfg.floor + 0.01)
    prcp[low] = np.minimum(prcp[low], cfg.floor)
    tavg = np.round(tavg, 2)

    miss_p = rng.uniform(size=(n, k)) < cfg.missing_fraction
    miss_t = rng.uniform(size=(n, k)) < cfg.missing_fraction
    prcp[miss_p] = np.nan
    tavg[miss_t] = np.nan
    data = pd.DataFrame({
        "id": np.tile(np.array(stations.ids, dtype=object), n),
        "date": np.repeat(dates.to_numpy(), k),
        "prcp": prcp.ravel(),
        "tavg": tavg.ravel(),
    })
    return stations, ObservationTable(data)


GCM_BIAS = {"AWI": 1.0, "MIROC": -0.8, "NorESM": 0.4}
SCENARIO_TREND = {"SSP2-4.5": 0.025, "SSP5-8.5": 0.05}


def generate_synthetic_gcm(gcm: str, scenario: str, start: str = "2015-01-01", end: str = "2100-12-31",
                           lon_range=(9.0, 17.0), lat_range=(45.0, 50.0), n_side: int = 3,
                           seed: int = 7, elev: float = 500.0) -> tuple[StationSet, ObservationTable]:
    """Pseudo-station temperature output of a climate model on a coarse grid.

    The series carries a per-model bias (seasonally modulated) and a linear
    warming trend per scenario; it has no missing values and no precipitation.
    """
    key = sum(map(ord, gcm + scenario))
    rng = np.random.Generator(np.random.Philox([seed, key]))
    lons = np.linspace(*lon_range, n_side)
    lats = np.linspace(*lat_range, n_side)
    gl, ga = np.meshgrid(lons, lats)
    stations = StationSet(tuple(Station(f"{gcm}_{i:03d}", float(a), float(b), elev)
                                for i, (a, b) in enumerate(zip(gl.ravel(), ga.ravel()))))
    dates = pd.date_range(start, end, freq="D")
    n, k = len(dates), len(stations)
    season = np.sin(2 * np.pi * (dates.dayofyear.to_numpy() - 105) / 365.25)
    years = (dates.year.to_numpy() - 2015) + dates.dayofyear.to_numpy() / 365.25
    xy = project_km(gl.ravel(), ga.ravel())
    anomaly = _correlated_ar1(rng, n, np.exp(-pairwise_distance(xy) / 1500.0), 0.8, 1.5)
    bias = GCM_BIAS.get(gcm, 0.0) * (1.0 + 0.5 * season)
    lat_c = ga.ravel() - np.mean(ga)
    tavg = (10.0 - 6.5 * elev / 1000.0 - 0.6 * lat_c)[None, :] + 8.5 * season[:, None] \
        + (0.75 + SCENARIO_TREND.get(scenario, 0.03) * years + bias)[:, None] + anomaly \
        + rng.normal(0, 0.2, (n, k))
    data = pd.DataFrame({
        "id": np.tile(np.array(stations.ids, dtype=object), n),
        "date": np.repeat(dates.to_numpy(), k),
        "prcp": np.nan,
        "tavg": np.round(tavg.ravel(), 2),
    })
    return stations, ObservationTable(data)


def write_dataset(stations: StationSet, table: ObservationTable, directory, prefix: str = "") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sp, op = directory / f"{prefix}stations.csv", directory / f"{prefix}observations.csv"
    save_stations(stations, sp)
    save_observations(table, op)
    return sp, op
