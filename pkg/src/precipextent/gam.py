"""A small penalized-spline GAM engine.

Terms are cubic B-splines with second-difference (P-spline) penalties,
cyclic cubic B-splines for day-of-year, tensor products of two marginal
bases, and plain linear covariates.  Spline terms carry a sum-to-zero
constraint so that the model intercept stays identifiable.

Fitting uses penalized IRLS for gaussian/gamma/binomial responses, with
smoothing parameters picked by GCV on a log-spaced grid, and penalized
maximum likelihood for generalized Pareto exceedances.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.interpolate import BSpline
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, gammaln

log = logging.getLogger(__name__)

LAMBDA_GRID = 10.0 ** np.linspace(-6.0, 3.0, 10)
ETA_MAX = 30.0
XI_BOUNDS = (-0.499, 0.999)


class GamError(RuntimeError):
    pass


class ConvergenceError(GamError):
    pass


class SingularSystemError(GamError):
    pass


# ---------------------------------------------------------------------------
# term specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """Cubic B-spline in one variable.

    ``cyclic=True`` gives a periodic basis on ``[0, period)`` whose value and
    first two derivatives match at the wrap point.
    """

    variable: str
    n_basis: int = 10
    cyclic: bool = False
    period: float | None = None
    order: int = 2

    def __post_init__(self):
        if self.n_basis < 4:
            raise ValueError("basis dimension must be at least 4")
        if self.cyclic and not (self.period and self.period > 0):
            raise ValueError("cyclic basis needs a positive period")

    @property
    def name(self) -> str:
        return f"s({self.variable})"


@dataclass(frozen=True)
class TensorSpec:
    first: BasisSpec
    second: BasisSpec

    @property
    def name(self) -> str:
        return f"te({self.first.variable},{self.second.variable})"


@dataclass(frozen=True)
class LinearSpec:
    variable: str

    @property
    def name(self) -> str:
        return self.variable


Term = Union[BasisSpec, TensorSpec, LinearSpec]


@dataclass(frozen=True)
class LinearPredictorSpec:
    terms: tuple
    intercept: bool = True

    def __post_init__(self):
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate term names: {names}")

    @property
    def variables(self) -> list[str]:
        out = []
        for t in self.terms:
            if isinstance(t, TensorSpec):
                out += [t.first.variable, t.second.variable]
            else:
                out.append(t.variable)
        return out


def canonical_spec(n_basis: int = 10, n_tensor: int = 6, period: float = 365.25,
                   covariate: str | None = "temp", year: bool = False) -> LinearPredictorSpec:
    """``f(lon, lat) + f(elev) + f(day) [+ f(year)] [+ beta * covariate]``."""
    terms: list[Term] = [
        TensorSpec(BasisSpec("lon", n_tensor), BasisSpec("lat", n_tensor)),
        BasisSpec("elev", n_basis),
        BasisSpec("doy", n_basis, cyclic=True, period=period),
    ]
    if year:
        terms.append(BasisSpec("year", n_basis))
    if covariate:
        terms.append(LinearSpec(covariate))
    return LinearPredictorSpec(tuple(terms))


# ---------------------------------------------------------------------------
# bases
# ---------------------------------------------------------------------------


def _difference_matrix(q: int, order: int, cyclic: bool) -> np.ndarray:
    if not cyclic:
        return np.diff(np.eye(q), n=order, axis=0)
    d = np.eye(q)
    for _ in range(order):
        d = np.roll(d, -1, axis=1) - d
    return d


@dataclass
class Basis:
    """A 1-D basis frozen on training data (knots fixed)."""

    spec: BasisSpec
    knots: np.ndarray

    @classmethod
    def from_data(cls, spec: BasisSpec, x: np.ndarray) -> "Basis":
        if spec.cyclic:
            dx = spec.period / spec.n_basis
            return cls(spec, dx * np.arange(-3, spec.n_basis + 4))
        x = np.asarray(x, dtype=float)
        lo, hi = float(np.min(x)), float(np.max(x))
        if hi - lo < 1e-9 * max(1.0, abs(lo)):
            lo, hi = lo - 0.5, hi + 0.5
        nseg = spec.n_basis - 3
        dx = (hi - lo) / nseg
        return cls(spec, lo + dx * np.arange(-3, nseg + 4))

    @property
    def dim(self) -> int:
        return self.spec.n_basis

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise GamError(f"non-finite values for {self.spec.variable}")
        if self.spec.cyclic:
            n = self.spec.n_basis
            full = BSpline(self.knots, np.eye(n + 3), 3, extrapolate=False)(np.mod(x, self.spec.period))
            full = np.nan_to_num(full)
            out = full[:, :n].copy()
            out[:, :3] += full[:, n:]
            return out
        # polynomial extension of the end pieces handles covariates beyond the knots
        return BSpline(self.knots, np.eye(self.dim), 3, extrapolate=True)(x)

    def penalty(self) -> np.ndarray:
        d = _difference_matrix(self.dim, self.spec.order, self.spec.cyclic)
        return d.T @ d


def _row_kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, :, None] * b[:, None, :]).reshape(len(a), a.shape[1] * b.shape[1])


@dataclass
class FrozenTerm:
    """A term with fixed knots, identifiability constraint and scaled penalties."""

    spec: Term
    bases: list
    constraint: np.ndarray | None
    penalties: list
    columns: slice = slice(0, 0)

    @property
    def name(self):
        return self.spec.name

    def raw(self, data) -> np.ndarray:
        if isinstance(self.spec, LinearSpec):
            x = np.asarray(data[self.spec.variable], dtype=float)
            if not np.all(np.isfinite(x)):
                raise GamError(f"non-finite values for {self.spec.variable}")
            return x[:, None]
        if isinstance(self.spec, TensorSpec):
            b1, b2 = self.bases
            return _row_kron(b1(data[self.spec.first.variable]), b2(data[self.spec.second.variable]))
        return self.bases[0](data[self.spec.variable])

    def __call__(self, data) -> np.ndarray:
        x = self.raw(data)
        return x if self.constraint is None else x @ self.constraint


def _sum_to_zero(x: np.ndarray) -> np.ndarray:
    c = x.sum(axis=0)[:, None]
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]


def _freeze(term: Term, data, constrain: bool) -> FrozenTerm:
    if isinstance(term, LinearSpec):
        return FrozenTerm(term, [], None, [])
    if isinstance(term, TensorSpec):
        b1 = Basis.from_data(term.first, data[term.first.variable])
        b2 = Basis.from_data(term.second, data[term.second.variable])
        raw_pen = [np.kron(b1.penalty(), np.eye(b2.dim)), np.kron(np.eye(b1.dim), b2.penalty())]
        bases = [b1, b2]
    else:
        b = Basis.from_data(term, data[term.variable])
        raw_pen = [b.penalty()]
        bases = [b]
    ft = FrozenTerm(term, bases, None, [])
    x = ft.raw(data)
    z = _sum_to_zero(x) if constrain else None
    xc = x if z is None else x @ z
    xtx = xc.T @ xc
    pens = []
    for s in raw_pen:
        s = s if z is None else z.T @ s @ z
        # scale so that a smoothing parameter of 1 weighs like the data block
        pens.append(s * (np.linalg.norm(xtx) / max(np.linalg.norm(s), 1e-300)))
    ft.constraint = z
    ft.penalties = pens
    return ft


@dataclass
class Design:
    """Design matrix builder frozen on a training table."""

    spec: LinearPredictorSpec
    terms: list
    n_coef: int

    @classmethod
    def from_data(cls, spec: LinearPredictorSpec, data) -> "Design":
        data = pd.DataFrame(data)
        _check_columns(spec, data)
        start = 1 if spec.intercept else 0
        terms = []
        for t in spec.terms:
            ft = _freeze(t, data, constrain=spec.intercept)
            width = ft(data.iloc[:1]).shape[1]
            ft.columns = slice(start, start + width)
            start += width
            terms.append(ft)
        return cls(spec, terms, start)

    def __call__(self, data) -> np.ndarray:
        data = pd.DataFrame(data)
        _check_columns(self.spec, data)
        blocks = [np.ones((len(data), 1))] if self.spec.intercept else []
        blocks += [t(data) for t in self.terms]
        return np.hstack(blocks)

    def penalty_blocks(self) -> list[tuple[str, np.ndarray]]:
        """Penalties embedded into full coefficient space, one per smoothing parameter."""
        out = []
        for t in self.terms:
            for j, s in enumerate(t.penalties):
                full = np.zeros((self.n_coef, self.n_coef))
                full[t.columns, t.columns] = s
                out.append((f"{t.name}[{j}]" if len(t.penalties) > 1 else t.name, full))
        return out

    def column_names(self) -> list[str]:
        names = ["(Intercept)"] if self.spec.intercept else []
        for t in self.terms:
            w = t.columns.stop - t.columns.start
            names += [t.name] if w == 1 else [f"{t.name}.{i}" for i in range(w)]
        return names

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        def spec_dict(t):
            if isinstance(t, LinearSpec):
                return {"kind": "linear", "variable": t.variable}
            if isinstance(t, TensorSpec):
                return {"kind": "tensor", "first": spec_dict(t.first), "second": spec_dict(t.second)}
            return {"kind": "spline", "variable": t.variable, "n_basis": t.n_basis,
                    "cyclic": t.cyclic, "period": t.period, "order": t.order}

        return {
            "intercept": self.spec.intercept,
            "terms": [{
                "spec": spec_dict(t.spec),
                "knots": [b.knots.tolist() for b in t.bases],
                "constraint": None if t.constraint is None else t.constraint.tolist(),
                "penalties": [p.tolist() for p in t.penalties],
                "columns": [t.columns.start, t.columns.stop],
            } for t in self.terms],
            "n_coef": self.n_coef,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Design":
        def make_spec(s):
            if s["kind"] == "linear":
                return LinearSpec(s["variable"])
            if s["kind"] == "tensor":
                return TensorSpec(make_spec(s["first"]), make_spec(s["second"]))
            return BasisSpec(s["variable"], s["n_basis"], s["cyclic"], s["period"], s["order"])

        terms = []
        for td in d["terms"]:
            spec = make_spec(td["spec"])
            if isinstance(spec, TensorSpec):
                subs = [spec.first, spec.second]
            elif isinstance(spec, BasisSpec):
                subs = [spec]
            else:
                subs = []
            bases = [Basis(s, np.asarray(k)) for s, k in zip(subs, td["knots"])]
            z = None if td["constraint"] is None else np.asarray(td["constraint"], dtype=float)
            terms.append(FrozenTerm(spec, bases, z, [np.asarray(p) for p in td["penalties"]],
                                    slice(*td["columns"])))
        spec = LinearPredictorSpec(tuple(t.spec for t in terms), d["intercept"])
        return cls(spec, terms, d["n_coef"])


def _check_columns(spec: LinearPredictorSpec, data):
    missing = [v for v in spec.variables if v not in data]
    if missing:
        raise GamError(f"missing covariates: {missing}")


def build_design(spec: LinearPredictorSpec, covariates) -> tuple[np.ndarray, list, Design]:
    """Return ``(X, penalties, design)`` for a training table."""
    design = Design.from_data(spec, covariates)
    return design(covariates), design.penalty_blocks(), design


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------


class Family:
    name = ""

    def check(self, y):
        pass

    def init_mu(self, y):
        raise NotImplementedError

    def link(self, mu):
        raise NotImplementedError

    def inverse(self, eta):
        raise NotImplementedError

    def dmu_deta(self, mu):
        raise NotImplementedError

    def variance(self, mu):
        raise NotImplementedError

    def deviance(self, y, mu):
        raise NotImplementedError


class Gaussian(Family):
    name = "gaussian-identity"

    def init_mu(self, y):
        return np.asarray(y, dtype=float).copy()

    def link(self, mu):
        return mu

    def inverse(self, eta):
        return eta

    def dmu_deta(self, mu):
        return np.ones_like(mu)

    def variance(self, mu):
        return np.ones_like(mu)

    def deviance(self, y, mu):
        return float(np.sum((y - mu) ** 2))


class GammaLog(Family):
    name = "gamma-log"

    def check(self, y):
        if np.any(~(y > 0)):
            raise GamError("gamma response must be strictly positive")

    def init_mu(self, y):
        return np.asarray(y, dtype=float).copy()

    def link(self, mu):
        return np.log(mu)

    def inverse(self, eta):
        return np.exp(np.clip(eta, -700, 700))

    def dmu_deta(self, mu):
        return mu

    def variance(self, mu):
        return mu * mu

    def deviance(self, y, mu):
        return float(2.0 * np.sum(-np.log(y / mu) + (y - mu) / mu))


class BinomialLogit(Family):
    name = "binomial-logit"

    def check(self, y):
        if np.any((y < 0) | (y > 1)):
            raise GamError("binomial response must lie in [0, 1]")

    def init_mu(self, y):
        return (np.asarray(y, dtype=float) + 0.5) / 2.0

    def link(self, mu):
        return np.log(mu / (1.0 - mu))

    def inverse(self, eta):
        return expit(eta)

    def dmu_deta(self, mu):
        return mu * (1.0 - mu)

    def variance(self, mu):
        return mu * (1.0 - mu)

    def deviance(self, y, mu):
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(y > 0, y * np.log(y / mu), 0.0)
            b = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - mu)), 0.0)
        return float(2.0 * np.sum(a + b))


FAMILIES = {f.name: f for f in (Gaussian(), GammaLog(), BinomialLogit())}


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[family]
    except KeyError:
        raise GamError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class PenalizedFit:
    coefficients: np.ndarray
    smoothing: dict
    family: str
    report: dict
    design: Design | None = None
    edf: float = float("nan")
    deviance: float = float("nan")
    extra: dict = field(default_factory=dict)

    def eta(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coefficients

    def term_contribution(self, name: str, data) -> np.ndarray:
        for t in self.design.terms:
            if t.name == name:
                return t(data) @ self.coefficients[t.columns]
        raise KeyError(name)

    def coefficient(self, name: str) -> float:
        for t in self.design.terms:
            if t.name == name and t.columns.stop - t.columns.start == 1:
                return float(self.coefficients[t.columns][0])
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "coefficients": self.coefficients.tolist(),
            "smoothing": self.smoothing,
            "report": self.report,
            "edf": self.edf,
            "deviance": self.deviance,
            "extra": self.extra,
            "design": None if self.design is None else self.design.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenalizedFit":
        return cls(np.asarray(d["coefficients"], dtype=float), d["smoothing"], d["family"],
                   d["report"], None if d["design"] is None else Design.from_dict(d["design"]),
                   d["edf"], d["deviance"], d.get("extra", {}))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "PenalizedFit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _combine(penalties, lambdas, p) -> np.ndarray:
    s = np.zeros((p, p))
    for (_, pen), lam in zip(penalties, lambdas):
        s += lam * pen
    return s


def _solve_spd(a: np.ndarray, b: np.ndarray):
    try:
        c = linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("penalized normal equations are singular") from exc
    if np.min(np.abs(np.diag(c[0]))) < 1e-10 * np.sqrt(np.max(np.abs(np.diag(a)))):
        raise SingularSystemError("penalized normal equations are numerically singular")
    return linalg.cho_solve(c, b, check_finite=False), c


def penalized_loglik(X, y, S, family, beta) -> float:
    """``-(D(beta) + beta' S beta) / 2`` with unit dispersion."""
    fam = get_family(family)
    mu = fam.inverse(X @ beta)
    return -0.5 * (fam.deviance(np.asarray(y, float), mu) + beta @ S @ beta)


def penalized_score(X, y, S, family, beta) -> np.ndarray:
    """Analytic gradient of :func:`penalized_loglik`, as used by IRLS."""
    fam = get_family(family)
    mu = fam.inverse(X @ beta)
    return X.T @ ((np.asarray(y, float) - mu) * fam.dmu_deta(mu) / fam.variance(mu)) - S @ beta


def _irls(X, y, S, fam: Family, beta0=None, max_iter=100, tol=1e-8):
    n, p = X.shape
    if beta0 is None:
        mu = fam.init_mu(y)
        if fam.name == "gamma-log":
            mu = np.maximum(mu, 1e-8)
        eta = fam.link(mu)
        beta = None
        pdev = np.inf
    else:
        beta = beta0
        eta = X @ beta
        mu = fam.inverse(eta)
        pdev = fam.deviance(y, mu) + beta @ S @ beta
    separated = False
    for it in range(1, max_iter + 1):
        g = fam.dmu_deta(mu)
        w = g * g / fam.variance(mu)
        z = eta + (y - mu) / g
        xw = X * w[:, None]
        new, chol = _solve_spd(xw.T @ X + S, xw.T @ z)
        new_eta = X @ new
        new_pdev = fam.deviance(y, fam.inverse(new_eta)) + new @ S @ new
        halvings = 0
        while beta is not None and not (new_pdev <= pdev * (1 + 1e-12) + 1e-12) and halvings < 40:
            new = 0.5 * (new + beta)
            new_eta = X @ new
            new_pdev = fam.deviance(y, fam.inverse(new_eta)) + new @ S @ new
            halvings += 1
        converged = np.isfinite(pdev) and abs(new_pdev - pdev) <= tol * (abs(new_pdev) + 1e-3)
        beta, eta, pdev = new, new_eta, new_pdev
        mu = fam.inverse(eta)
        if fam.name == "binomial-logit" and np.max(np.abs(eta)) > ETA_MAX:
            separated = True
            break
        if converged:
            break
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")
    g = fam.dmu_deta(mu)
    w = g * g / fam.variance(mu)
    xtwx = (X * w[:, None]).T @ X
    _, chol = _solve_spd(xtwx + S, np.zeros(p))
    edf = float(np.trace(linalg.cho_solve(chol, xtwx)))
    dev = fam.deviance(y, mu)
    return beta, {"iterations": it, "converged": not separated, "separation": separated,
                  "penalized_deviance": float(pdev)}, edf, dev


def _gaussian_direct(X, y, xtx, xty, S):
    """Closed-form penalized least squares; ``xtx``/``xty`` are precomputed."""
    beta, chol = _solve_spd(xtx + S, xty)
    edf = float(np.trace(linalg.cho_solve(chol, xtx)))
    r = y - X @ beta
    dev = float(r @ r)
    return beta, {"iterations": 1, "converged": True, "separation": False,
                  "penalized_deviance": dev + float(beta @ S @ beta)}, edf, dev


def _gcv(n, dev, edf):
    return n * dev / max(n - edf, 1e-8) ** 2


def _select_grid(penalties, score_fn, grid=LAMBDA_GRID, sweeps: int = 2, start=1e-2):
    """Coordinate-wise search of one smoothing parameter per penalty."""
    lambdas = [start] * len(penalties)
    best = score_fn(lambdas)
    for _ in range(sweeps):
        changed = False
        for j in range(len(penalties)):
            for lam in grid:
                if lam == lambdas[j]:
                    continue
                trial = list(lambdas)
                trial[j] = float(lam)
                try:
                    val = score_fn(trial)
                except GamError:
                    continue
                if val < best - 1e-12 * abs(best):
                    lambdas, best, changed = trial, val, True
        if not changed:
            break
    return lambdas, best


def fit_penalized(X, penalties, y, family="gaussian-identity", smoothing=None,
                  design: Design | None = None, max_iter: int = 100, tol: float = 1e-8,
                  grid=LAMBDA_GRID) -> PenalizedFit:
    """Penalized IRLS fit.

    ``penalties`` is a list of ``(name, matrix)`` pairs.  ``smoothing`` is a
    sequence of fixed smoothing parameters (one per penalty); when ``None``
    they are chosen by GCV over ``grid``.
    """
    fam = get_family(family)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    fam.check(y)
    n, p = X.shape
    if len(y) != n:
        raise GamError("response length does not match the design")

    if fam.name == "gaussian-identity":
        xtx, xty = X.T @ X, X.T @ y

    def run(lambdas, beta0=None):
        s = _combine(penalties, lambdas, p)
        if fam.name == "gaussian-identity":
            return _gaussian_direct(X, y, xtx, xty, s)
        return _irls(X, y, s, fam, beta0, max_iter, tol)

    if smoothing is None and penalties:
        cache = {}

        def score(lambdas):
            beta, rep, edf, dev = run(lambdas)
            cache[tuple(lambdas)] = (beta, rep, edf, dev)
            return _gcv(n, dev, edf)

        lambdas, _ = _select_grid(penalties, score, grid)
        beta, rep, edf, dev = cache[tuple(lambdas)]
        rep = dict(rep, criterion="GCV", gcv=_gcv(n, dev, edf))
    else:
        lambdas = [] if not penalties else [float(v) for v in np.broadcast_to(smoothing, (len(penalties),))]
        beta, rep, edf, dev = run(lambdas)
    if not np.all(np.isfinite(beta)):
        raise ConvergenceError("non-finite coefficients")
    sm = {name: lam for (name, _), lam in zip(penalties, lambdas)}
    return PenalizedFit(beta, sm, fam.name, rep, design, edf, dev)


def fit_gam(spec: LinearPredictorSpec, data, y, family="gaussian-identity", smoothing=None,
            **kw) -> PenalizedFit:
    """Build the design for ``data`` and fit."""
    X, pens, design = build_design(spec, data)
    return fit_penalized(X, pens, y, family, smoothing, design=design, **kw)


def predict_eta(fit: PenalizedFit, covariates) -> np.ndarray:
    if fit.design is None:
        raise GamError("fit has no design attached")
    return fit.design(covariates) @ fit.coefficients


def gamma_shape_mle(y, mu) -> float:
    """Maximum-likelihood gamma shape for fixed means (profile over the shape)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    r = y / mu
    stat = np.mean(np.log(r) - r)

    def nll(logk):
        k = np.exp(logk)
        return -(k * np.log(k) - gammaln(k) + k * stat)

    res = minimize_scalar(nll, bounds=(-10, 10), method="bounded", options={"xatol": 1e-10})
    return float(np.exp(res.x))


# ---------------------------------------------------------------------------
# generalized Pareto tail
# ---------------------------------------------------------------------------


def gp_logpdf(y, sigma, xi):
    """Generalized Pareto log density; the exponential limit is used for |xi| < 1e-12."""
    y, sigma = np.broadcast_arrays(np.asarray(y, float), np.asarray(sigma, float))
    z = y / sigma
    if abs(xi) < 1e-12:
        return -np.log(sigma) - z
    t = 1.0 + xi * z
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -np.log(sigma) - (1.0 + 1.0 / xi) * np.log1p(xi * z)
    return np.where((t > 0) & (y >= 0), out, -np.inf)


def gp_survival(y, sigma, xi):
    y = np.asarray(y, float)
    z = y / sigma
    if abs(xi) < 1e-12:
        return np.exp(-z)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(1 + xi * z > 0, np.exp(-np.log1p(xi * z) / xi), 0.0)


def gp_quantile(p, sigma, xi):
    """``sigma ((1-p)^-xi - 1) / xi`` with the ``-sigma log(1-p)`` limit."""
    p = np.asarray(p, float)
    if abs(xi) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-xi * np.log1p(-p)) / xi


def _gp_nll_grad(params, X, y, u, S):
    beta, xi = params[:-1], params[-1]
    eta = X @ beta
    sigma = u * np.exp(eta)
    z = y / sigma
    t = 1.0 + xi * z
    if np.any(t <= 0) or not np.all(np.isfinite(sigma)):
        return np.inf, np.zeros_like(params)
    if abs(xi) < 1e-8:
        # second-order expansion around xi = 0
        ll = -np.log(sigma) - z + xi * (0.5 * z * z - z)
        dl_deta = -1.0 + z - xi * (z * z - z)
        dl_dxi = 0.5 * z * z - z
    else:
        lg = np.log1p(xi * z)
        ll = -np.log(sigma) - (1.0 + 1.0 / xi) * lg
        dl_deta = -1.0 + (1.0 + xi) * z / t
        dl_dxi = lg / xi ** 2 - (1.0 + 1.0 / xi) * z / t
    pen = beta @ S @ beta
    f = -np.sum(ll) + 0.5 * pen
    g = np.empty_like(params)
    g[:-1] = -X.T @ dl_deta + S @ beta
    g[-1] = -np.sum(dl_dxi)
    return float(f), g


def _fit_gp_once(X, y, u, S, x0):
    """Quasi-Newton fit in coordinates whitened by the approximate information.

    With ``beta = R^{-1} g`` where ``R' R = X'X / (1 + 2 xi) + S`` and
    ``xi = t / sqrt(n)`` the Hessian is close to the identity, so L-BFGS-B
    needs few iterations even for heavily penalized fits.
    """
    n, p = X.shape
    info = X.T @ X / 1.2 + S
    info += 1e-10 * np.trace(info) / max(p, 1) * np.eye(p)
    try:
        r = linalg.cholesky(info, lower=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("GP information matrix is singular") from exc
    sx = np.sqrt(n)

    def to_orig(g):
        return np.append(linalg.solve_triangular(r, g[:-1]), g[-1] / sx)

    def fun(g):
        f, grad = _gp_nll_grad(to_orig(g), X, y, u, S)
        return f, np.append(linalg.solve_triangular(r, grad[:-1], trans="T"), grad[-1] / sx)

    g0 = np.append(r @ x0[:-1], x0[-1] * sx)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(fun, g0, jac=True, method="L-BFGS-B",
                       bounds=[(None, None)] * p + [(XI_BOUNDS[0] * sx, XI_BOUNDS[1] * sx)],
                       options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-9})
    if not np.isfinite(res.fun):
        raise ConvergenceError(f"GP fit failed: {res.message}")
    res.x = to_orig(res.x)
    return res


def fit_gp_tail(X, penalties, exceedances, thresholds, smoothing=None,
                design: Design | None = None, grid=LAMBDA_GRID, xi0: float = 0.1) -> PenalizedFit:
    """Penalized GP likelihood with scale ``u * exp(X beta)`` and a global shape.

    When ``smoothing`` is None each smoothing parameter is chosen on
    ``grid`` by minimising ``-2 loglik + 2 edf``, with the effective degrees of
    freedom taken from the expected information ``X'X / (1 + 2 xi)``.
    The shape parameter is returned in ``fit.extra["xi"]``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(exceedances, dtype=float)
    u = np.broadcast_to(np.asarray(thresholds, dtype=float), y.shape)
    if np.any(~(y > 0)):
        raise GamError("exceedances must be strictly positive")
    if np.ptp(y) <= 1e-12 * np.max(y):
        raise GamError("all exceedances are equal; GP likelihood is degenerate")
    n, p = X.shape
    beta0 = np.zeros(p)
    if p and np.allclose(X[:, 0], 1.0):
        beta0[0] = np.log(np.mean(y / u) * (1 - xi0))
    x0 = np.append(beta0, xi0)

    def run(lambdas, start=x0):
        s = _combine(penalties, lambdas, p)
        res = _fit_gp_once(X, y, u, s, start)
        xi = float(res.x[-1])
        info = X.T @ X / (1.0 + 2.0 * xi)
        edf = float(np.trace(np.linalg.solve(info + s, info))) + 1.0
        ll = float(np.sum(gp_logpdf(y, u * np.exp(X @ res.x[:-1]), xi)))
        return res, edf, ll

    if smoothing is None and penalties:
        cache = {}

        def score(lambdas):
            res, edf, ll = run(lambdas)
            cache[tuple(lambdas)] = (res, edf, ll)
            return -2.0 * ll + 2.0 * edf

        lambdas, _ = _select_grid(penalties, score, grid)
        res, edf, ll = cache[tuple(lambdas)]
        criterion = "AIC"
    else:
        lambdas = [] if not penalties else [float(v) for v in np.broadcast_to(smoothing, (len(penalties),))]
        res, edf, ll = run(lambdas)
        criterion = "fixed"
    beta, xi = res.x[:-1], float(res.x[-1])
    report = {"converged": bool(res.success), "iterations": int(res.nit), "message": str(res.message),
              "criterion": criterion, "loglik": ll}
    sm = {name: lam for (name, _), lam in zip(penalties, lambdas)}
    return PenalizedFit(beta, sm, "generalized-pareto", report, design, edf, -2.0 * ll, {"xi": xi})


def fit_gp_gam(spec: LinearPredictorSpec, data, exceedances, thresholds, smoothing=None,
               **kw) -> PenalizedFit:
    X, pens, design = build_design(spec, data)
    return fit_gp_tail(X, pens, exceedances, thresholds, smoothing, design=design, **kw)
