"""Time-varying r-Pareto dependence model for spatial extreme events.

Events are unit-Pareto vectors whose power-mean aggregate exceeds a high
threshold.  Dependence is the log-Gaussian (Brown-Resnick) class with the
power semivariogram

    gamma(h; t) = (||h|| / exp(lambda0 + lambda1 * temp_t)) ** nu

and is estimated by minimising a weighted gradient score, which only needs
derivatives of the log intensity and never its normalising constant.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import minimize
from scipy.special import ndtr, ndtri

from .geo import pairwise_distance

log = logging.getLogger(__name__)

CHI_CUTOFF = 0.05
LOG_2PI = math.log(2.0 * math.pi)
# nu = 2 gives a degenerate (rank <= 2) Gaussian field on planar sites
NU_BOUNDS = (0.05, 1.99)
BOOTSTRAP_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)


class DependenceError(RuntimeError):
    """Raised when an event set or a dependence fit is unusable."""


class NotPositiveDefinite(DependenceError):
    pass


def norm_cdf(x):
    return ndtr(x)


def norm_ppf(p):
    return ndtri(p)


@dataclass(frozen=True)
class Semivariogram:
    """Power semivariogram whose range depends on a temporal covariate."""

    nu: float
    lambda0: float
    lambda1: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.nu <= 2.0):
            raise ValueError(f"nu must lie in (0, 2], got {self.nu}")
        if not (np.isfinite(self.lambda0) and np.isfinite(self.lambda1)):
            raise ValueError("lambda0 and lambda1 must be finite")

    def range(self, temp=0.0):
        return np.exp(self.lambda0 + self.lambda1 * np.asarray(temp, dtype=float))

    def __call__(self, h, temp=0.0):
        h = np.abs(np.asarray(h, dtype=float))
        return (h / self.range(temp)) ** self.nu

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.nu, self.lambda0, self.lambda1)


@dataclass(frozen=True)
class RiskFunctional:
    """Power mean ``r(y) = (mean_k y_k**theta) ** (1/theta)`` over non-missing entries."""

    theta: float = 1.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")

    def __call__(self, y, axis=-1):
        y = np.asarray(y, dtype=float)
        with np.errstate(invalid="ignore"):
            m = np.nanmean(y ** self.theta, axis=axis)
        return m ** (1.0 / self.theta)

    def partials(self, y):
        """Return ``y_j * dr/dy_j`` for every observed component (NaN elsewhere)."""
        y = np.asarray(y, dtype=float)
        k = np.sum(~np.isnan(y), axis=-1, keepdims=True)
        r = self(y, axis=-1)[..., None]
        return r ** (1.0 - self.theta) * y ** self.theta / k


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    index: int
    day: np.datetime64
    temp: float
    r: float
    sites: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class EventSet:
    """Spatial extreme events on a fixed station network.

    ``values`` has shape (n_events, K) on the unit-Pareto scale with NaN for
    missing stations.  ``coords`` are planar kilometres.
    """

    station_ids: tuple
    coords: np.ndarray
    days: np.ndarray
    temp: np.ndarray
    values: np.ndarray
    r: np.ndarray
    u: float
    theta: float

    def __post_init__(self):
        n, k = self.values.shape
        if len(self.station_ids) != k or self.coords.shape != (k, 2):
            raise ValueError("station metadata does not match the value matrix")
        if not (len(self.days) == len(self.temp) == len(self.r) == n):
            raise ValueError("per-event arrays must have one entry per event")

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> Event:
        row = self.values[i]
        sites = np.flatnonzero(~np.isnan(row))
        return Event(int(i), self.days[i], float(self.temp[i]), float(self.r[i]), sites, row[sites])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dist(self) -> np.ndarray:
        return pairwise_distance(self.coords)

    def take(self, idx) -> "EventSet":
        idx = np.asarray(idx, dtype=int)
        return replace(self, days=self.days[idx], temp=self.temp[idx],
                       values=self.values[idx], r=self.r[idx])

    def with_temp(self, temp) -> "EventSet":
        return replace(self, temp=np.asarray(temp, dtype=float))

    def to_frame(self) -> pd.DataFrame:
        ev, st = np.nonzero(~np.isnan(self.values))
        return pd.DataFrame({
            "event": ev,
            "day": pd.to_datetime(self.days[ev]).strftime("%Y-%m-%d"),
            "temp": self.temp[ev],
            "r": self.r[ev],
            "station": np.asarray(self.station_ids, dtype=object)[st],
            "value": self.values[ev, st],
            "u": self.u,
            "theta": self.theta,
        })

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path, station_ids: Sequence, coords: np.ndarray) -> "EventSet":
        df = pd.read_csv(path, dtype={"station": str}, float_precision="round_trip")
        if df.empty:
            raise DependenceError(f"{path}: no events")
        pos = {s: i for i, s in enumerate(station_ids)}
        n = int(df["event"].max()) + 1
        values = np.full((n, len(station_ids)), np.nan)
        values[df["event"].to_numpy(), df["station"].map(pos).to_numpy()] = df["value"].to_numpy()
        first = df.groupby("event").first().sort_index()
        return cls(tuple(station_ids), np.asarray(coords, dtype=float),
                   pd.to_datetime(first["day"]).to_numpy(), first["temp"].to_numpy(float),
                   values, first["r"].to_numpy(float), float(df["u"].iloc[0]),
                   float(df["theta"].iloc[0]))


def extract_events(field, theta: float, quantile: float = 0.8, min_obs: int = 5,
                   min_days: int = 20) -> EventSet:
    """Select days whose risk functional exceeds its empirical ``quantile``.

    ``field`` is a ParetoField (anything exposing ``values``, ``dates``,
    ``temp``, ``station_ids`` and ``coords_km``).  Only days with at least
    ``min_obs`` non-missing values take part, both in the threshold and as
    candidate events.
    """
    values = np.asarray(field.values, dtype=float)
    if values.size == 0:
        raise DependenceError("empty Pareto field")
    risk = RiskFunctional(theta)
    nobs = np.sum(~np.isnan(values), axis=1)
    ok = np.flatnonzero(nobs >= min_obs)
    if len(ok) < min_days:
        raise DependenceError(f"only {len(ok)} days with >= {min_obs} observations (need {min_days})")
    r = risk(values[ok])
    u = float(np.quantile(r, quantile))
    sel = ok[r >= u]
    return EventSet(tuple(field.station_ids), np.asarray(field.coords_km, dtype=float),
                    np.asarray(field.dates)[sel], np.asarray(field.temp, dtype=float)[sel],
                    values[sel], r[r >= u], u, float(theta))


# ---------------------------------------------------------------------------
# log intensity and its derivatives
# ---------------------------------------------------------------------------


def _psi_base(g: np.ndarray) -> np.ndarray:
    """Conditional covariance (up to the range scale) with site 0 as reference.

    ``g`` is (..., m, m); the result is (..., m-1, m-1).
    """
    g0 = g[..., 1:, 0]
    return g0[..., :, None] + g0[..., None, :] - g[..., 1:, 1:]


def _intensity_terms(logy: np.ndarray, scale: np.ndarray, g: np.ndarray):
    """Vectorised log intensity with derivatives in log-space.

    logy  : (n, m) log values at the m observed sites (site 0 is the reference)
    scale : (n,) range factor ``exp(lambda0 + lambda1*temp) ** -nu``
    g     : (m, m) matrix of ``dist ** nu`` shared by all rows, or (n, m, m)

    Returns ``(loglam, d, h)`` where ``d`` and ``h`` are the first and the
    diagonal second derivatives of log lambda with respect to ``log y``.
    """
    n, m = logy.shape
    if m == 1:
        return -2.0 * logy[:, 0], np.full((n, 1), -2.0), np.zeros((n, 1))
    g = g if g.ndim == 3 else g[None]
    psi = _psi_base(g)
    try:
        chol = np.linalg.cholesky(psi)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("conditional covariance is not positive definite "
                                  "(co-located sites?)") from exc
    linv = np.linalg.inv(chol)
    q = np.swapaxes(linv, -1, -2) @ linv
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    omega = logy[:, 1:] - logy[:, :1] + scale[:, None] * g[:, 1:, 0]
    v = (omega[:, None, :] @ q)[:, 0, :] / scale[:, None]
    quad = np.sum(omega * v, axis=1)
    k = m - 1
    loglam = (-2.0 * logy[:, 0] - np.sum(logy[:, 1:], axis=1) - 0.5 * quad
              - 0.5 * (k * LOG_2PI + logdet + k * np.log(scale)))
    d = np.empty((n, m))
    d[:, 0] = -2.0 + v.sum(axis=1)
    d[:, 1:] = -1.0 - v
    h = np.empty((n, m))
    h[:, 0] = -q.sum(axis=(-2, -1)) / scale
    h[:, 1:] = -np.diagonal(q, axis1=-2, axis2=-1) / scale[:, None]
    return loglam, d, h


def _event_geometry(y, dist, sv: Semivariogram, temp):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or np.any(~(y > 0)):
        raise ValueError("event components must be strictly positive")
    dist = np.asarray(dist, dtype=float).reshape(len(y), len(y))
    g = dist ** sv.nu
    scale = np.atleast_1d(sv.range(temp) ** (-sv.nu))
    return y, g, scale


def intensity_log_density(y, dist, sv: Semivariogram, temp: float = 0.0) -> float:
    """Log intensity of the log-Gaussian exponent measure at ``y``.

    ``dist`` is the distance matrix between the observed sites; the first
    site is the reference.  The result does not depend on that choice.
    """
    y, g, scale = _event_geometry(y, dist, sv, temp)
    return float(_intensity_terms(np.log(y)[None, :], scale, g)[0][0])


def intensity_log_density_derivatives(y, dist, sv: Semivariogram, temp: float = 0.0):
    """Return ``(log lambda, d/dy log lambda, diag d2/dy2 log lambda)``."""
    y, g, scale = _event_geometry(y, dist, sv, temp)
    loglam, d, h = _intensity_terms(np.log(y)[None, :], scale, g)
    d, h = d[0], h[0]
    return float(loglam[0]), d / y, (h - d) / y ** 2


def score_weights(y, u: float, theta: float):
    """Weights ``w_j = y_j (1 - exp(-(r/u - 1)))`` and their partials ``dw_j/dy_j``."""
    y = np.asarray(y, dtype=float)
    risk = RiskFunctional(theta)
    r = risk(y)
    e = np.exp(-(r / u - 1.0))
    a = 1.0 - e
    w = y * a
    dw = a + e * risk.partials(y) / u
    return w, dw


def _score_from_terms(d, h, a, c):
    return np.sum(c * d + (a * a)[:, None] * (h - d + 0.5 * d * d), axis=1)


def _weight_terms(values: np.ndarray, u: float, theta: float):
    """Per-event ``a = 1 - exp(-(r/u - 1))`` and ``c_j = 2 a (a + e y_j dr/dy_j / u)``."""
    risk = RiskFunctional(theta)
    r = risk(values)
    e = np.exp(-(r / u - 1.0))
    a = 1.0 - e
    c = 2.0 * a[:, None] * (a[:, None] + e[:, None] * risk.partials(values) / u)
    return r, a, c


def gradient_score(y, dist, sv: Semivariogram, u: float, theta: float, temp: float = 0.0) -> float:
    """Weighted gradient score of one event (lower is better)."""
    y, g, scale = _event_geometry(y, dist, sv, temp)
    r, a, c = _weight_terms(y[None, :], u, theta)
    if r[0] < u * (1.0 - 1e-12):
        raise DependenceError(f"r(y) = {r[0]:.6g} is below the threshold {u:.6g}")
    _, d, h = _intensity_terms(np.log(y)[None, :], scale, g)
    return float(_score_from_terms(d, h, a, c)[0])


class ScoreObjective:
    """Mean gradient score of an event set as a function of (nu, lambda0, lambda1).

    Events are grouped by their number of observed stations so that each
    evaluation runs one batched Cholesky factorisation per group; events
    sharing a pattern of observed stations reuse a single factorisation.
    """

    def __init__(self, events: EventSet):
        if len(events) == 0:
            raise DependenceError("no events")
        vals = events.values
        mask = ~np.isnan(vals)
        if np.any(mask.sum(axis=1) < 1):
            raise DependenceError("event without observations")
        if np.any(events.r < events.u * (1.0 - 1e-12)):
            raise DependenceError("event set contains non-exceedances")
        dist = events.dist
        self.n = len(events)
        self.groups = []
        self.order = []
        counts = mask.sum(axis=1)
        for m in np.unique(counts):
            rows = np.flatnonzero(counts == m)
            sites = np.array([np.flatnonzero(mask[i]) for i in rows])
            y = vals[rows[:, None], sites]
            _, a, c = _weight_terms(y, events.u, events.theta)
            patterns, inverse = np.unique(sites, axis=0, return_inverse=True)
            if len(patterns) == 1:
                d = dist[np.ix_(patterns[0], patterns[0])]
            else:
                d = dist[sites[:, :, None], sites[:, None, :]]
            self.groups.append((np.log(y), events.temp[rows], d, a, c))
            self.order.append(rows)
        self.order = np.concatenate(self.order)

    def scores(self, params) -> np.ndarray:
        """Per-event scores in the original event order."""
        out = np.empty(self.n)
        out[self.order] = np.concatenate([_score_from_terms(*self._terms(g, params)) for g in self.groups])
        return out

    def __call__(self, params) -> float:
        try:
            with np.errstate(all="ignore"):
                total = sum(_score_from_terms(*self._terms(g, params)).sum() for g in self.groups)
        except NotPositiveDefinite:
            return np.inf
        return float(total / self.n) if np.isfinite(total) else np.inf

    @staticmethod
    def _terms(group, params):
        nu, l0, l1 = params
        logy, temp, dist, a, c = group
        scale = np.exp(-nu * (l0 + l1 * temp))
        _, d, h = _intensity_terms(logy, scale, dist ** nu)
        return d, h, a, c


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class DependenceFit:
    nu: float
    lambda0: float
    lambda1: float
    objective: float
    n_events: int
    u: float
    theta: float
    report: dict = field(default_factory=dict)
    bootstrap: np.ndarray | None = None
    n_failed: int = 0
    covariate_constants: dict | None = None

    PARAMS = ("nu", "lambda0", "lambda1")

    @property
    def semivariogram(self) -> Semivariogram:
        return Semivariogram(self.nu, self.lambda0, self.lambda1)

    @property
    def estimate(self) -> np.ndarray:
        return np.array([self.nu, self.lambda0, self.lambda1])

    def quantiles(self, levels: Iterable[float] = BOOTSTRAP_LEVELS) -> pd.DataFrame:
        if self.bootstrap is None:
            raise DependenceError("no bootstrap replicates attached")
        levels = list(levels)
        q = np.quantile(self.bootstrap, levels, axis=0)
        return pd.DataFrame(q.T, index=list(self.PARAMS), columns=[f"q{100 * p:g}" for p in levels])

    def summary_row(self, **labels) -> dict:
        """One Table-3-style row: estimate and 95% bootstrap interval per parameter."""
        row = dict(labels)
        row["n_events"] = self.n_events
        q = self.quantiles((0.025, 0.975)) if self.bootstrap is not None else None
        for i, name in enumerate(self.PARAMS):
            row[name] = self.estimate[i]
            row[f"{name}_lo"] = q.iloc[i, 0] if q is not None else np.nan
            row[f"{name}_hi"] = q.iloc[i, 1] if q is not None else np.nan
        return row

    def to_dict(self) -> dict:
        return {
            "nu": self.nu, "lambda0": self.lambda0, "lambda1": self.lambda1,
            "objective": self.objective, "n_events": self.n_events,
            "u": self.u, "theta": self.theta, "report": self.report,
            "bootstrap": None if self.bootstrap is None else self.bootstrap.tolist(),
            "n_failed": self.n_failed, "covariate_constants": self.covariate_constants,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DependenceFit":
        d = dict(d)
        if d.get("bootstrap") is not None:
            d["bootstrap"] = np.asarray(d["bootstrap"], dtype=float).reshape(-1, 3)
        return cls(**d)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "DependenceFit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_starts(events: EventSet) -> list[tuple[float, float, float]]:
    """Five deterministic starting points built from the station spacing."""
    d = events.dist
    iu = np.triu_indices_from(d, k=1)
    pos = d[iu][d[iu] > 0]
    l0 = float(np.log(np.median(pos))) if len(pos) else 0.0
    starts = [(nu, l0 + s, 0.0) for nu in (0.3, 1.0) for s in (-1.0, 1.0)]
    starts.append((0.5, l0, 0.0))
    return starts


def default_bounds(events: EventSet):
    d = events.dist
    pos = d[d > 0]
    lo = float(np.log(pos.min())) - 5.0 if len(pos) else -5.0
    hi = float(np.log(pos.max())) + 8.0 if len(pos) else 10.0
    return [NU_BOUNDS, (lo, hi), (-5.0, 5.0)]


def _initial_simplex(x0, bounds, step=(0.1, 0.5, 0.2)):
    pts = [np.asarray(x0, dtype=float)]
    for i, h in enumerate(step):
        p = pts[0].copy()
        p[i] = p[i] + h if p[i] + h <= bounds[i][1] else p[i] - h
        pts.append(p)
    return np.array(pts)


def fit_gradient_score(events: EventSet, init=None, bounds=None, min_events: int = 20,
                       maxiter: int = 500) -> DependenceFit:
    """Fit (nu, lambda0, lambda1) by minimising the mean gradient score.

    ``init`` is a list of starting points (default: five deterministic
    starts).  A bounded Nelder-Mead search runs from each start and is
    polished with L-BFGS-B; the best finite optimum is kept.
    """
    if len(events) < min_events:
        raise DependenceError(f"{len(events)} events, need at least {min_events}")
    objective = ScoreObjective(events)
    starts = default_starts(events) if init is None else [tuple(map(float, s)) for s in np.atleast_2d(init)]
    bounds = default_bounds(events) if bounds is None else bounds
    runs = []
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        f0 = objective(x0)
        if not np.isfinite(f0):
            runs.append({"start": list(map(float, x0)), "success": False, "fun": None,
                         "message": "non-finite objective at start"})
            continue
        # simplex stage tolerates infeasible (non positive definite) trial points;
        # the quasi-Newton polish then starts close to the optimum
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            simplex = minimize(objective, x0, method="Nelder-Mead", bounds=bounds,
                               options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-10,
                                        "initial_simplex": _initial_simplex(x0, bounds)})
            res = minimize(objective, simplex.x, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter, "ftol": 1e-13, "gtol": 1e-9})
        if not (np.isfinite(res.fun) and res.fun <= simplex.fun):
            res = simplex
        ok = bool(np.isfinite(res.fun))
        runs.append({"start": list(map(float, x0)), "x": list(map(float, res.x)),
                     "fun": float(res.fun) if ok else None, "success": ok,
                     "converged": bool(res.success), "nfev": int(simplex.nfev + res.nfev),
                     "message": str(res.message)})
    good = [r for r in runs if r["success"]]
    if not good:
        raise DependenceError("gradient-score fit failed from every start")
    best = min(good, key=lambda r: r["fun"])
    nu, l0, l1 = best["x"]
    return DependenceFit(nu, l0, l1, best["fun"], len(events), float(events.u),
                         float(events.theta), report={"starts": runs})


def _refit(events: EventSet, idx, start, bounds):
    try:
        f = fit_gradient_score(events.take(idx), init=[start], bounds=bounds)
        return f.estimate
    except DependenceError:
        return None


def bootstrap_fit(events: EventSet, replicates: int = 300, seed: int = 0,
                  base: DependenceFit | None = None, n_jobs: int = 1,
                  max_fail_fraction: float = 0.1) -> DependenceFit:
    """Nonparametric bootstrap: resample events with replacement and refit.

    Replicates start from the point estimate.  Resampling indices are drawn
    up front from a Philox stream so results do not depend on ``n_jobs``.
    """
    if base is None:
        base = fit_gradient_score(events)
    rng = np.random.Generator(np.random.Philox(seed))
    n = len(events)
    draws = [rng.integers(0, n, size=n) for _ in range(replicates)]
    bounds = default_bounds(events)
    start = tuple(base.estimate)
    if n_jobs == 1:
        out = [_refit(events, idx, start, bounds) for idx in draws]
    else:
        out = Parallel(n_jobs=n_jobs)(delayed(_refit)(events, idx, start, bounds) for idx in draws)
    failed = sum(o is None for o in out)
    if failed > max_fail_fraction * replicates:
        raise DependenceError(f"{failed} of {replicates} bootstrap replicates failed")
    reps = np.array([o for o in out if o is not None]).reshape(-1, 3)
    fit = replace(base, bootstrap=reps, n_failed=failed)
    fit.report = dict(base.report, bootstrap_seed=seed, bootstrap_replicates=replicates)
    return fit


def chi(sv: Semivariogram, h, temp=0.0):
    """Tail-correlation coefficient ``2 - 2 Phi(sqrt(gamma/2))``."""
    g = sv(h, temp)
    return 2.0 * ndtr(-np.sqrt(g / 2.0))
