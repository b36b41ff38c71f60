"""Batch pipeline driven by a YAML config.

Stages, in order: ingest, covariate, marginal, depfit, project, simulate, report.
Each stage writes its artifacts into ``<output>/<stage>/`` together with a
``manifest.json`` (config hash, root seed, input and output hashes) and a
``timings.log``.  A stage whose recorded inputs are unchanged is skipped.

Exit codes: 0 ok, 2 config or input-data error, 3 missing upstream artifact,
4 numerical failure, 5 output directory locked by another process.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from filelock import FileLock, Timeout

from . import __version__
from .covariate import (BasinGrid, CovariateError, CovariateSeries, ScenarioSeries, average_scenarios,
                        build_covariate, debias_gcm, fit_kriging_model, gcm_basin_series, make_basin_grid)
from .extent import ExtentError, scenario_report
from .gam import GamError
from .ingest import (IngestError, SeasonDef, SyntheticConfig, annual_mean, daily_mean_over_years,
                     generate_synthetic, generate_synthetic_gcm, load_observations, load_stations,
                     save_observations, save_stations, split_by_season, write_dataset)
from .marginal import MarginalError, MarginalModel, ParetoField, fit_marginal, qq_export, to_unit_pareto
from .rpareto import (DependenceError, DependenceFit, Semivariogram, bootstrap_fit, extract_events,
                      fit_gradient_score)
from .simulate import SimulationError, figure4, make_rng, scattered_layout, simulate_eventset, write_figure4

log = logging.getLogger("precipextent")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_LOCKED = 0, 2, 3, 4, 5
STAGES = ("ingest", "covariate", "marginal", "depfit", "project", "simulate", "report")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _from_dict(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {where!r}: {sorted(extra)}")
    return cls(**d)


@dataclass
class DataConfig:
    stations: str = "stations.csv"
    observations: str = "observations.csv"
    polygon: list | None = None
    grid: str | None = None
    grid_resolution: float = 0.4622


@dataclass
class CovariateConfig:
    window: int = 30
    training: list | None = None


@dataclass
class MarginalConfig:
    floor: float = 10.0
    bulk_quantile: float = 0.9
    min_exceedances: int = 30


@dataclass
class DependenceConfig:
    thetas: list = field(default_factory=lambda: [1.0, "xi"])
    event_quantile: float = 0.8
    min_obs: int = 5
    min_events: int = 20
    bootstrap: int = 300
    seasons: list | None = None


@dataclass
class ScenarioInput:
    gcm: str
    scenario: str
    stations: str
    observations: str


@dataclass
class ExtentConfig:
    cutoff: float = 0.05
    smoothing_years: int = 10
    historical_years: list = field(default_factory=lambda: [1965, 2015])
    future_years: list = field(default_factory=lambda: [2016, 2100])
    gcm_years: list = field(default_factory=lambda: [2015, 2020])
    obs_years: list = field(default_factory=lambda: [2010, 2015])
    projection_start: str = "2016-01-01"


@dataclass
class SimulateConfig:
    figure4: bool = True
    figure4_size: int = 50
    figure4_lambdas: list = field(default_factory=lambda: [2.0, 5.0, 10.0])
    figure4_alpha: float = 5.0
    events: dict | None = None


@dataclass
class PipelineConfig:
    basin: str = "basin"
    output: str = "output"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    seasons: dict = field(default_factory=lambda: SeasonDef().to_dict())
    covariate: CovariateConfig = field(default_factory=CovariateConfig)
    marginal: MarginalConfig = field(default_factory=MarginalConfig)
    dependence: DependenceConfig = field(default_factory=DependenceConfig)
    scenarios: list = field(default_factory=list)
    extent: ExtentConfig = field(default_factory=ExtentConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    base_dir: str = field(default=".", compare=False, repr=False)

    SECTIONS = {"data": DataConfig, "covariate": CovariateConfig, "marginal": MarginalConfig,
                "dependence": DependenceConfig, "extent": ExtentConfig, "simulate": SimulateConfig}

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        top = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        extra = set(d) - top
        if extra:
            raise ConfigError(f"unknown top-level key(s): {sorted(extra)}")
        kw = {k: d[k] for k in ("basin", "output", "seed") if k in d}
        for name, sub in cls.SECTIONS.items():
            kw[name] = _from_dict(sub, d.get(name), name)
        kw["scenarios"] = [_from_dict(ScenarioInput, s, "scenarios") for s in d.get("scenarios") or []]
        if "seasons" in d:
            kw["seasons"] = {str(k): v for k, v in d["seasons"].items()}
        cfg = cls(**kw, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    def validate(self) -> None:
        try:
            SeasonDef.from_dict(self.seasons)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid season definition: {exc}") from exc
        for name, q in (("marginal.bulk_quantile", self.marginal.bulk_quantile),
                        ("dependence.event_quantile", self.dependence.event_quantile)):
            if not 0.0 < float(q) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for t in self.dependence.thetas:
            if t != "xi" and not (isinstance(t, (int, float)) and t > 0):
                raise ConfigError(f"theta must be positive or 'xi', got {t!r}")
        if self.dependence.bootstrap < 0 or self.covariate.window < 1:
            raise ConfigError("bootstrap must be >= 0 and window >= 1")
        if self.data.polygon is None and self.data.grid is None:
            raise ConfigError("data.polygon or data.grid is required")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def outdir(self) -> Path:
        return self.path(self.output)

    @property
    def season_def(self) -> SeasonDef:
        return SeasonDef.from_dict(self.seasons)

    def section_hash(self, *names) -> str:
        d = self.to_dict()
        return _hash_bytes(json.dumps({n: d[n] for n in names}, sort_keys=True).encode())


def load_config(path, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = PipelineConfig.from_dict(doc, base_dir=path.parent)
    if seed is not None:
        cfg.seed = int(seed)
        cfg.validate()
    return cfg


def dump_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _hash_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(root: int, *keys) -> int:
    """Deterministic child seed of the root seed."""
    words = [int(root)] + [int(_hash_bytes(str(k).encode())[:8], 16) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


class Stage:
    """Bookkeeping for one stage: input key, outputs, manifest, timings."""

    def __init__(self, cfg: PipelineConfig, name: str, sections=(), upstream=(), inputs=()):
        self.cfg, self.name = cfg, name
        self.dir = cfg.outdir / name
        self.upstream = list(upstream)
        for up in self.upstream:
            if not (cfg.outdir / up / "manifest.json").is_file():
                raise MissingArtifact(f"stage {name!r} needs the {up!r} artifacts; run that stage first")
        for p in inputs:
            if not Path(p).is_file():
                raise ConfigError(f"input file {p} does not exist")
        key = {"stage": name, "version": __version__, "seed": cfg.seed,
               "config": cfg.section_hash(*sections) if sections else None,
               "upstream": {u: self._read_manifest(cfg.outdir / u)["outputs"] for u in self.upstream},
               "inputs": {self._label(p): file_hash(p) for p in inputs}}
        self.key = _hash_bytes(json.dumps(key, sort_keys=True).encode())
        self.outputs: list[Path] = []
        self.timings: list[tuple[str, float]] = []

    def _label(self, p) -> str:
        """Input path relative to the config directory, so keys survive moving the project."""
        p = Path(p).resolve()
        try:
            return p.relative_to(Path(self.cfg.base_dir).resolve()).as_posix()
        except ValueError:
            return p.as_posix()

    @staticmethod
    def _read_manifest(d: Path) -> dict:
        with open(d / "manifest.json") as fh:
            return json.load(fh)

    def up(self, stage: str, name: str) -> Path:
        p = self.cfg.outdir / stage / name
        if not p.is_file():
            raise MissingArtifact(f"missing artifact {p}")
        return p

    def done(self) -> bool:
        mf = self.dir / "manifest.json"
        if not mf.is_file():
            return False
        m = self._read_manifest(self.dir)
        if m.get("input_key") != self.key:
            return False
        return all((self.dir / p).is_file() and file_hash(self.dir / p) == h for p, h in m["outputs"].items())

    def file(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.outputs.append(p)
        return p

    def timed(self, label: str, t0: float) -> None:
        self.timings.append((label, time.perf_counter() - t0))

    def finish(self) -> None:
        manifest = {"stage": self.name, "version": __version__, "seed": self.cfg.seed,
                    "input_key": self.key,
                    "outputs": {p.relative_to(self.dir).as_posix(): file_hash(p) for p in sorted(set(self.outputs))}}
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        with open(self.dir / "timings.log", "w") as fh:
            for label, sec in self.timings:
                fh.write(f"{label}\t{sec:.3f}s\n")


def _theta_label(t) -> str:
    return "xi" if t == "xi" else f"{float(t):g}"


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _grid(cfg: PipelineConfig, stations) -> BasinGrid:
    if cfg.data.grid:
        return BasinGrid.from_csv(cfg.path(cfg.data.grid))
    poly = cfg.data.polygon
    if isinstance(poly, str):
        df = pd.read_csv(cfg.path(poly))
        poly = df[["lon", "lat"]].to_numpy().tolist()
    return make_basin_grid(poly, cfg.data.grid_resolution, stations=stations)


def _load_ingested(st: Stage):
    stations = load_stations(st.up("ingest", "stations.csv"))
    return stations, load_observations(st.up("ingest", "observations.csv"), stations)


def cmd_ingest(cfg: PipelineConfig, **_) -> Stage:
    sp, op = cfg.path(cfg.data.stations), cfg.path(cfg.data.observations)
    st = Stage(cfg, "ingest", ("seasons",), inputs=(sp, op))
    if st.done():
        return st
    t0 = time.perf_counter()
    stations = load_stations(sp)
    table = load_observations(op, stations)
    save_stations(stations, st.file("stations.csv"))
    save_observations(table, st.file("observations.csv"))
    daily_mean_over_years(table).to_csv(st.file("daily_mean.csv"), float_format="%.10g")
    annual_mean(table).to_csv(st.file("annual_mean.csv"), float_format="%.10g")
    parts = split_by_season(table, cfg.season_def)
    pd.DataFrame({"season": list(parts), "rows": [len(p) for p in parts.values()]}).to_csv(
        st.file("season_counts.csv"), index=False)
    st.timed("ingest", t0)
    st.finish()
    return st


def cmd_covariate(cfg: PipelineConfig, **_) -> Stage:
    inputs = [cfg.path(p) for s in cfg.scenarios for p in (s.stations, s.observations)]
    if isinstance(cfg.data.polygon, str):
        inputs.append(cfg.path(cfg.data.polygon))
    if cfg.data.grid:
        inputs.append(cfg.path(cfg.data.grid))
    st = Stage(cfg, "covariate", ("data", "covariate", "scenarios", "extent", "seasons"), ["ingest"], inputs)
    if st.done():
        return st
    stations, table = _load_ingested(st)
    t0 = time.perf_counter()
    grid = _grid(cfg, stations)
    grid.to_csv(st.file("grid.csv"))
    model = fit_kriging_model(table, stations)
    model.to_json(st.file("kriging.json"))
    st.timed("kriging fit", t0)
    t0 = time.perf_counter()
    cov = build_covariate(model, table, stations, grid, cfg.covariate.window, cfg.covariate.training)
    cov.to_csv(st.file("covariate.csv"))
    cov.to_json(st.file("covariate.json"))
    st.timed("covariate", t0)
    by_scenario: dict[str, list] = {}
    for s in cfg.scenarios:
        t0 = time.perf_counter()
        gst = load_stations(cfg.path(s.stations))
        gtab = load_observations(cfg.path(s.observations), gst)
        raw, _ = gcm_basin_series(gtab, gst, grid, cfg.covariate.window)
        ser = debias_gcm(raw, cov, cfg.season_def, s.gcm, s.scenario, tuple(cfg.extent.gcm_years),
                         tuple(cfg.extent.obs_years), cfg.extent.projection_start)
        by_scenario.setdefault(s.scenario, []).append(ser)
        st.timed(f"scenario {s.gcm} {s.scenario}", t0)
    for scen, members in sorted(by_scenario.items()):
        if len(members) > 1:
            members = members + [average_scenarios(members)]
        for ser in members:
            stem = f"scenario_{ser.gcm}_{ser.scenario}"
            ser.to_csv(st.file(stem + ".csv"))
            ser.to_json(st.file(stem + ".json"))
    st.finish()
    return st


def _covariate(st: Stage) -> CovariateSeries:
    return CovariateSeries.load(st.up("covariate", "covariate.csv"), st.up("covariate", "covariate.json"))


def cmd_marginal(cfg: PipelineConfig, **_) -> Stage:
    st = Stage(cfg, "marginal", ("marginal", "seasons"), ["ingest", "covariate"])
    if st.done():
        return st
    stations, table = _load_ingested(st)
    cov = _covariate(st)
    t0 = time.perf_counter()
    m = fit_marginal(table, stations, cov, cfg.marginal.floor, cfg.marginal.bulk_quantile,
                     cfg.season_def, cfg.marginal.min_exceedances)
    st.timed("marginal fit", t0)
    m.to_json(st.file("model.json"))
    t0 = time.perf_counter()
    to_unit_pareto(m, table, stations, cov).to_csv(st.file("pareto.csv"))
    qq_export(m, table, cov, path=st.file("qq.csv"))
    st.timed("transform", t0)
    st.finish()
    return st


def cmd_depfit(cfg: PipelineConfig, threads: int = 1, **_) -> Stage:
    st = Stage(cfg, "depfit", ("dependence", "seasons"), ["ingest", "marginal", "covariate"])
    if st.done():
        return st
    stations = load_stations(st.up("ingest", "stations.csv"))
    cov = _covariate(st)
    model = MarginalModel.from_json(st.up("marginal", "model.json"))
    pf = ParetoField.from_csv(st.up("marginal", "pareto.csv"), stations, cov)
    seasons = cfg.season_def
    labels = seasons(pf.dates)
    wanted = cfg.dependence.seasons or list(seasons.labels)
    rows = []
    for si, season in enumerate(wanted):
        keep = labels == season
        sub = ParetoField(pf.station_ids, pf.coords_km, pf.dates[keep], pf.temp[keep], pf.values[keep])
        for ti, t in enumerate(cfg.dependence.thetas):
            theta = model.xi if t == "xi" else float(t)
            tag = f"{season}_theta-{_theta_label(t)}"
            t0 = time.perf_counter()
            events = extract_events(sub, theta, cfg.dependence.event_quantile, cfg.dependence.min_obs,
                                    cfg.dependence.min_events)
            events.to_csv(st.file(f"events_{tag}.csv"))
            if cfg.dependence.bootstrap > 0:
                fit = bootstrap_fit(events, cfg.dependence.bootstrap, derive_seed(cfg.seed, "bootstrap", season, ti),
                                    n_jobs=threads)
            else:
                fit = fit_gradient_score(events, min_events=cfg.dependence.min_events)
            fit.covariate_constants = cov.constants
            fit.report = dict(fit.report, season=season, theta_label=_theta_label(t))
            fit.to_json(st.file(f"fit_{tag}.json"))
            st.timed(f"fit {tag}", t0)
            rows.append({"season": season, "theta_label": _theta_label(t), "theta": theta,
                         "n_events": len(events), "u": events.u, "file": f"fit_{tag}.json"})
    pd.DataFrame(rows).to_csv(st.file("fits.csv"), index=False, float_format="%.10g")
    st.finish()
    return st


def _load_fits(st: Stage) -> tuple[pd.DataFrame, dict]:
    index = pd.read_csv(st.up("depfit", "fits.csv"), keep_default_na=False, float_precision="round_trip")
    fits = {}
    for r in index.itertuples():
        fits[(r.season, float(r.theta))] = DependenceFit.from_json(st.up("depfit", r.file))
    return index, fits


def cmd_project(cfg: PipelineConfig, **_) -> Stage:
    st = Stage(cfg, "project", ("extent", "seasons", "basin"), ["covariate", "depfit"])
    if st.done():
        return st
    cov = _covariate(st)
    _, fits = _load_fits(st)
    scen_dir = cfg.outdir / "covariate"
    scenarios = [ScenarioSeries.load(p, p.with_suffix(".json")) for p in sorted(scen_dir.glob("scenario_*.csv"))]
    t0 = time.perf_counter()
    e = cfg.extent
    scenario_report(fits, cov, scenarios, st.dir, cfg.basin, cfg.season_def, e.smoothing_years,
                    tuple(e.historical_years), tuple(e.future_years), cutoff=e.cutoff)
    for name in ("extent.csv", "extent_summary.csv", "extent_manifest.json"):
        st.file(name)
    st.timed("projection", t0)
    st.finish()
    return st


def cmd_simulate(cfg: PipelineConfig, **_) -> Stage:
    st = Stage(cfg, "simulate", ("simulate",))
    if st.done():
        return st
    sim = cfg.simulate
    if sim.figure4:
        t0 = time.perf_counter()
        seed = derive_seed(cfg.seed, "figure4")
        panels = figure4(seed, tuple(sim.figure4_lambdas), sim.figure4_alpha, sim.figure4_size)
        write_figure4(panels, st.dir, seed, sim.figure4_alpha)
        for lam in panels:
            st.file(f"figure4_lambda{lam:g}.csv")
        st.file("figure4_manifest.json")
        st.timed("figure4", t0)
    if sim.events:
        t0 = time.perf_counter()
        ev = dict(sim.events)
        truth = Semivariogram(ev.get("nu", 0.5), ev.get("lambda0", 2.0), ev.get("lambda1", -0.3))
        seed = derive_seed(cfg.seed, "events")
        cov = make_rng(derive_seed(seed, "covariate")).standard_normal(2000)
        cov = (cov - cov.mean()) / cov.std(ddof=1)
        coords = scattered_layout(int(ev.get("n_sites", 30)), float(ev.get("extent", 20.0)),
                                  derive_seed(seed, "layout"))
        events = simulate_eventset(truth, cov, coords, int(ev.get("n_events", 500)),
                                   float(ev.get("theta", 1.0)), seed)
        events.to_csv(st.file("simulated_events.csv"))
        pd.DataFrame(coords, columns=["x", "y"]).assign(station=list(events.station_ids)).to_csv(
            st.file("simulated_sites.csv"), index=False, float_format="%.17g")
        st.timed("eventset", t0)
    st.dir.mkdir(parents=True, exist_ok=True)
    st.finish()
    return st


def cmd_report(cfg: PipelineConfig, **_) -> Stage:
    st = Stage(cfg, "report", ("basin",), ["depfit", "project"])
    if st.done():
        return st
    index, fits = _load_fits(st)
    counts = index[["season", "theta_label", "theta", "n_events", "u"]].assign(basin=cfg.basin)
    counts.to_csv(st.file("event_counts.csv"), index=False, float_format="%.10g")
    rows = []
    for r in index.itertuples():
        fit = fits[(r.season, float(r.theta))]
        rows.append(fit.summary_row(basin=cfg.basin, season=r.season, theta=r.theta_label))
    pd.DataFrame(rows).to_csv(st.file("dependence_estimates.csv"), index=False, float_format="%.10g")
    extent = pd.read_csv(st.up("project", "extent.csv"))
    ensemble = extent[extent["gcm"].isin(["OBS", "AVG"])]
    ensemble.to_csv(st.file("extent_ensemble.csv"), index=False, float_format="%.10g")
    st.finish()
    return st


COMMANDS = {"ingest": cmd_ingest, "covariate": cmd_covariate, "marginal": cmd_marginal,
            "depfit": cmd_depfit, "project": cmd_project, "simulate": cmd_simulate, "report": cmd_report}


def run_pipeline(cfg: PipelineConfig, stages=STAGES, threads: int = 1) -> list:
    done = []
    for name in stages:
        st = COMMANDS[name](cfg, threads=threads)
        log.info("stage %s: %s", name, "up to date" if not st.outputs else "written")
        done.append(st)
    return done


# ---------------------------------------------------------------------------
# synthetic setup
# ---------------------------------------------------------------------------


def write_synthetic_project(directory, seed: int = 1, n_stations: int = 25, start="1990-01-01",
                            end="2015-12-31", gcm_end="2100-12-31", gcms=("AWI", "MIROC", "NorESM"),
                            scenarios=("SSP2-4.5", "SSP5-8.5"), bootstrap: int = 300) -> Path:
    """Generate synthetic station and climate-model inputs plus a matching config."""
    directory = Path(directory)
    syn = SyntheticConfig(n_stations=n_stations, start=start, end=end, seed=seed)
    stations, table = generate_synthetic(syn)
    write_dataset(stations, table, directory / "data")
    scen = []
    for g in gcms:
        for s in scenarios:
            gs, gt = generate_synthetic_gcm(g, s, end=gcm_end, lon_range=syn.lon_range, lat_range=syn.lat_range,
                                            seed=seed)
            prefix = f"{g}_{s}_"
            write_dataset(gs, gt, directory / "data", prefix)
            scen.append({"gcm": g, "scenario": s, "stations": f"data/{prefix}stations.csv",
                         "observations": f"data/{prefix}observations.csv"})
    (lo0, lo1), (la0, la1) = syn.lon_range, syn.lat_range
    doc = {"basin": "synthetic", "output": "output", "seed": seed,
           "data": {"stations": "data/stations.csv", "observations": "data/observations.csv",
                    "polygon": [[lo0, la0], [lo1, la0], [lo1, la1], [lo0, la1]]},
           "dependence": {"bootstrap": bootstrap}, "scenarios": scen}
    cfg = PipelineConfig.from_dict(doc, directory)
    path = directory / "config.yaml"
    dump_config(cfg, path)
    return path


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="precipextent", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["run"]:
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run the pipeline")
        sp.add_argument("--config", required=True, help="YAML pipeline config")
        sp.add_argument("--seed", type=int, default=None, help="override the root seed")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for bootstrap refits")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "run":
            sp.add_argument("--stage", action="append", choices=STAGES,
                            help="run only this stage (repeatable); default all")
    sp = sub.add_parser("synthetic", help="write synthetic inputs and a config")
    sp.add_argument("directory")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--stations", type=int, default=25)
    sp.add_argument("--start", default="1990-01-01")
    sp.add_argument("--end", default="2015-12-31")
    sp.add_argument("--gcm-end", default="2100-12-31")
    sp.add_argument("--bootstrap", type=int, default=300)
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


NUMERIC_ERRORS = (GamError, DependenceError, SimulationError, MarginalError, CovariateError, ExtentError,
                  np.linalg.LinAlgError, FloatingPointError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synthetic":
            path = write_synthetic_project(args.directory, args.seed, args.stations, args.start, args.end,
                                           args.gcm_end, bootstrap=args.bootstrap)
            print(path)
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        stages = (args.stage or STAGES) if args.command == "run" else [args.command]
        cfg.outdir.mkdir(parents=True, exist_ok=True)
        with FileLock(str(cfg.outdir / ".lock"), timeout=0):
            run_pipeline(cfg, [s for s in STAGES if s in stages], threads=max(1, args.threads))
    except Timeout:
        log.error("output directory is locked by another run")
        return EXIT_LOCKED
    except (ConfigError, IngestError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NUMERIC_ERRORS as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
