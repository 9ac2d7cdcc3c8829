"""Command-line entry point: ``stcount <subcommand> [options]``.

Exit status is 0 on success, 1 when a model or data error stops the run and
2 for usage or configuration errors. Every run that writes outputs also
writes a ``run.json`` record with the resolved configuration and results.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import FORMAT_VERSIONS, __version__, bench, carbayes, preprocess, simulate
from .core import (CountPanel, StcountError, fmt, load_adjacency, load_count_panel,
                   load_covariate_table, load_populations, population_fractions, write_adjacency,
                   write_count_panel, write_covariate_table, write_forecast, write_matrix_csv,
                   write_populations)

log = logging.getLogger("stcount")


class ConfigError(Exception):
    """Usage or configuration problem (exit status 2)."""


# -- configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    panel: Path | None = None
    adjacency: Path | None = None
    populations: Path | None = None
    covariates: list = field(default_factory=list)  # {"name", "file", "lag", "smooth"}
    preprocess: dict = field(default_factory=dict)  # window, max_lag, per, positives
    ee: dict = field(default_factory=dict)
    mcglm: dict = field(default_factory=dict)
    car: dict = field(default_factory=dict)
    seed: int = 0
    out: Path | None = None

    _PREPROCESS = ("window", "max_lag", "per", "positives")

    @classmethod
    def from_dict(cls, d: dict, base=Path(".")) -> "RunConfig":
        known = {"panel", "adjacency", "populations", "covariates", "preprocess", "ee", "mcglm", "car",
                 "seed", "out"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        cfg = cls()
        for k in ("panel", "adjacency", "populations", "out"):
            if d.get(k) is not None:
                setattr(cfg, k, Path(base) / d[k])
        cfg.covariates = [dict(c, file=Path(base) / c["file"]) for c in d.get("covariates", [])]
        cfg.preprocess = dict(d.get("preprocess", {}))
        for kind in ("ee", "mcglm", "car"):
            setattr(cfg, kind, dict(d.get(kind, {})))
        cfg.seed = int(d.get("seed", 0))
        return cfg

    def validate(self) -> None:
        for c in self.covariates:
            if not {"name", "file"} <= set(c):
                raise ConfigError("each covariate needs a name and a file")
            if int(c.get("lag", 0)) < 0:
                raise ConfigError(f"covariate {c['name']!r}: lag must be >= 0")
            if int(c.get("smooth", 1)) < 1:
                raise ConfigError(f"covariate {c['name']!r}: smooth must be >= 1")
        extra = set(self.preprocess) - set(self._PREPROCESS)
        if extra:
            raise ConfigError(f"unknown preprocess options {sorted(extra)}")
        for kind in ("ee", "mcglm", "car"):
            try:
                bench.check_options(kind, getattr(self, kind))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        names = [c["name"] for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names")
        for kind in ("ee", "mcglm", "car"):
            for n in getattr(self, kind).get("covariates", ()):
                if n not in names:
                    raise ConfigError(f"{kind}: unknown covariate {n!r}")

    def require(self, *names) -> None:
        for n in names:
            p = getattr(self, n)
            if p is None:
                raise ConfigError(f"--{n} is required")
            if not Path(p).is_file():
                raise ConfigError(f"{n} file not found: {p}")
        for c in self.covariates:
            if not Path(c["file"]).is_file():
                raise ConfigError(f"covariate file not found: {c['file']}")

    def to_dict(self) -> dict:
        s = lambda p: None if p is None else str(p)
        return {
            "panel": s(self.panel), "adjacency": s(self.adjacency), "populations": s(self.populations),
            "covariates": [dict(c, file=str(c["file"])) for c in self.covariates],
            "preprocess": self.preprocess, "ee": self.ee, "mcglm": self.mcglm, "car": self.car,
            "seed": self.seed,
        }


def _csv_list(s):
    return [x.strip() for x in s.split(",") if x.strip()] if s else []


def _parse_covariate(s: str) -> dict:
    """``NAME=FILE[:LAG[:SMOOTH]]``."""
    if "=" not in s:
        raise ConfigError(f"--covariate expects NAME=FILE[:LAG[:SMOOTH]], got {s!r}")
    name, rest = s.split("=", 1)
    parts = rest.split(":")
    try:
        d = {"name": name, "file": Path(parts[0])}
        if len(parts) > 1:
            d["lag"] = int(parts[1])
        if len(parts) > 2:
            d["smooth"] = int(parts[2])
    except ValueError:
        raise ConfigError(f"--covariate {s!r}: lag and smooth must be integers") from None
    return d


def _parse_harmonics(s: str) -> dict:
    out = {}
    for item in _csv_list(s):
        k, _, v = item.partition("=")
        try:
            out[k] = int(v or 1)
        except ValueError:
            raise ConfigError(f"--harmonics expects nu=S,phi=S, got {s!r}") from None
    return out


def resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            with path.open() as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = RunConfig.from_dict(raw, base=path.parent)
    else:
        cfg = RunConfig()
    # flags override config fields
    for k in ("panel", "adjacency", "populations", "out"):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, Path(v))
    if getattr(args, "covariate", None):
        given = [_parse_covariate(c) for c in args.covariate]
        names = {c["name"] for c in given}
        cfg.covariates = [c for c in cfg.covariates if c["name"] not in names] + given
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, key in (("window", "window"), ("max_lag", "max_lag"), ("positives", "positives")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.preprocess[key] = v
    cmd = args.command
    if cmd == "fit-ee":
        _set(cfg.ee, "family", args.family)
        _set(cfg.ee, "covariates", _csv_list(args.endemic_covariates) if args.endemic_covariates is not None else None)
        _set(cfg.ee, "per_region", _csv_list(args.per_region_intercepts)
             if args.per_region_intercepts is not None else None)
        _set(cfg.ee, "harmonics", _parse_harmonics(args.harmonics) if args.harmonics else None)
        _set(cfg.ee, "components", _csv_list(args.components) if args.components else None)
    elif cmd == "fit-mcglm":
        _set(cfg.mcglm, "power", args.power)
        _set(cfg.mcglm, "cov_link", args.cov_link)
        _set(cfg.mcglm, "components", _csv_list(args.components) if args.components is not None else None)
        _set(cfg.mcglm, "covariates", _csv_list(args.covariates) if args.covariates is not None else None)
        _set(cfg.mcglm, "lag_transform", args.lag_transform)
        if args.lagged_neighbours:
            cfg.mcglm["lagged_neighbours"] = True
    elif cmd == "fit-car":
        _set(cfg.car, "iterations", args.iters)
        _set(cfg.car, "burnin", args.burnin)
        _set(cfg.car, "thin", args.thin)
        _set(cfg.car, "chains", args.chains)
        _set(cfg.car, "covariates", _csv_list(args.covariates) if args.covariates is not None else None)
        if args.paper_approx:
            cfg.car["mode"] = "paper-approx"
    cfg.validate()
    return cfg


def _set(d, key, value):
    if value is not None:
        d[key] = value


# -- shared helpers --------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, Path):
        return str(x)
    return x


def write_json(obj, path) -> None:
    with Path(path).open("w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Collects output files and results for the run record."""

    def __init__(self, args, cfg: RunConfig | None, outdir: Path | None):
        self.args, self.cfg, self.outdir = args, cfg, outdir
        self.outputs, self.results = [], {}
        self.dry = bool(getattr(args, "dry_run", False))

    def path(self, name) -> Path:
        return self.outdir / name

    def wrote(self, path):
        self.outputs.append(Path(path).name)

    def finish(self, record_path=None):
        rec = {
            "command": self.args.command,
            "version": __version__,
            "seed": self.cfg.seed if self.cfg else getattr(self.args, "seed", None),
            "config": self.cfg.to_dict() if self.cfg else None,
            "outputs": sorted(self.outputs),
            "results": self.results,
        }
        write_json(rec, record_path or self.path("run.json"))


def _prepare_out(cfg: RunConfig, dry: bool) -> Path:
    if cfg.out is None:
        raise ConfigError("--out is required")
    if not dry:
        cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _load_inputs(cfg: RunConfig, need_adjacency=True, need_populations=True):
    names = ["panel"] + ["adjacency"] * need_adjacency + ["populations"] * need_populations
    cfg.require(*names)
    panel = load_count_panel(cfg.panel)
    adj = load_adjacency(cfg.adjacency) if need_adjacency else None
    if adj is not None:
        adj.check_regions(panel.regions)
    pops = load_populations(cfg.populations, panel.regions) if need_populations else None
    covs = bench.load_covariates(cfg.covariates, panel, Path("."))
    return panel, adj, pops, covs


# -- subcommands -----------------------------------------------------------------

def cmd_preprocess(args, cfg: RunConfig) -> int:
    pp = {"window": 4, "max_lag": 20, "per": 100000.0, **cfg.preprocess}
    need_pop = cfg.populations is not None
    panel, _, pops, _ = _load_inputs(cfg, need_adjacency=False, need_populations=need_pop)
    run = Run(args, cfg, _prepare_out(cfg, args.dry_run))
    window, max_lag = int(pp["window"]), int(pp["max_lag"])
    if window < 1 or max_lag < 0:
        raise ConfigError("window must be >= 1 and max_lag >= 0")

    # positives (leading series) come from a covariate table; smoothing applies to them
    pos = None
    if cfg.covariates:
        name = pp.get("positives", cfg.covariates[0]["name"])
        entry = next((c for c in cfg.covariates if c["name"] == name), None)
        if entry is None:
            raise ConfigError(f"unknown positives covariate {name!r}")
        _, pdates, pvals = load_covariate_table(entry["file"], panel.regions)
        aligned = preprocess.align_covariate(name, pdates, pvals, panel)
        pos = aligned.values[:, :panel.N]
    series = pos if pos is not None else panel.values.astype(float)
    smoothed = preprocess.trailing_mean(series, window)
    lead = pos.sum(axis=0) if pos is not None else panel.values.sum(axis=0).astype(float)
    corr = preprocess.cross_correlogram(lead, panel.values.sum(axis=0).astype(float), max_lag)
    m, v, flagged = preprocess.mean_variance_pairs(panel)
    slope = preprocess.power_law_slope(m, v, flagged)
    run.results = {"window": window, "max_lag": max_lag, "correlogram_peaks": list(corr.peaks),
                   "argmax_lag": corr.argmax, "mean_variance_slope": slope,
                   "smoothed_series": "positives" if pos is not None else "counts"}
    if args.dry_run:
        log.info("dry run: inputs valid, nothing written")
        return 0
    write_matrix_csv(run.path("smoothed.csv"), panel.regions, panel.dates, smoothed)
    run.wrote("smoothed.csv")
    with run.path("correlogram.csv").open("w") as fh:
        fh.write("lag,corr\n")
        for lag, c in zip(corr.lags, corr.correlations):
            fh.write(f"{int(lag)},{fmt(c)}\n")
    run.wrote("correlogram.csv")
    with run.path("mean_variance.csv").open("w") as fh:
        fh.write("date,mean,var,flagged\n")
        for d, a, b, f in zip(panel.dates, m, v, flagged):
            fh.write(f"{d.isoformat()},{fmt(a)},{fmt(b)},{int(f)}\n")
    run.wrote("mean_variance.csv")
    if pops is not None:
        write_matrix_csv(run.path("incidence.csv"), panel.regions, panel.dates,
                         preprocess.incidence(panel, pops, float(pp["per"])))
        run.wrote("incidence.csv")
    if not args.no_figures:
        from . import plotting
        run.wrote(plotting.correlogram_figure(corr, run.path("correlogram.png")))
        run.wrote(plotting.mean_variance_figure(m, v, flagged, run.path("mean_variance.png"), slope))
    run.finish()
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    if not args.scenario:
        raise ConfigError("--scenario is required")
    try:
        with open(args.scenario) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {args.scenario}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.scenario}: invalid JSON ({exc})") from None
    if args.generator:
        raw["generator"] = args.generator
    try:
        scn = simulate.scenario_from_dict(raw, seed=args.seed)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{args.scenario}: bad scenario ({exc})") from None
    if args.out is None:
        raise ConfigError("--out is required")
    if scn.generator == "ee":
        panel, covs, _ = simulate.simulate_ee(scn)
    else:
        panel, covs, _ = simulate.simulate_car(scn)
    prefix = str(args.out)
    run = Run(args, cfg, Path(prefix).parent)
    run.results = {"generator": scn.generator, "K": scn.K, "N": scn.N, "seed": scn.seed,
                   "total_count": int(panel.values.sum())}
    if args.dry_run:
        return 0
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    files = {f"{prefix}_counts.csv": lambda p: write_count_panel(panel, p),
             f"{prefix}_adjacency.csv": lambda p: write_adjacency(scn.adjacency, p),
             f"{prefix}_populations.csv": lambda p: write_populations(scn.regions, scn.populations, p)}
    for c in covs:
        files[f"{prefix}_covariate_{c.name}.csv"] = (
            lambda p, c=c: write_covariate_table(panel.regions, panel.dates, c.values[:, :panel.N], p))
    for p, writer in files.items():
        writer(p)
        run.wrote(p)
    run.finish(f"{prefix}_run.json")
    return 0


def _fit_command(args, cfg: RunConfig, kind: str) -> int:
    panel, adj, pops, covs = _load_inputs(cfg)
    run = Run(args, cfg, _prepare_out(cfg, args.dry_run))
    options = getattr(cfg, kind)
    bench.check_options(kind, options)
    if args.dry_run:
        log.info("dry run: inputs valid, nothing written")
        return 0
    fm = bench.fit_model(kind, options, panel, adj, population_fractions(pops), covs, seed=cfg.seed)
    _emit_fit(run, fm, panel)
    horizon = getattr(args, "forecast", None)
    if horizon:
        fc = fm.forecast(int(horizon), cfg.seed)
        _emit_forecast(run, args, panel, fc)
    run.finish()
    return 0


def _emit_fit(run: Run, fm, panel: CountPanel):
    report = dict(fm.report)
    report["RMSEf"] = fm.rmse_f(panel)
    write_json(report, run.path("fit.json"))
    run.wrote("fit.json")
    T = fm.fitted.shape[1]
    write_matrix_csv(run.path("fitted.csv"), panel.regions, panel.dates[fm.t0:fm.t0 + T], fm.fitted)
    run.wrote("fitted.csv")
    if fm.kind == "car":
        chain, spec = fm.fit
        _write_chains(run.path("chains.csv"), chain)
        run.wrote("chains.csv")
    run.results = {"measures": fm.measures, "RMSEf": report["RMSEf"]}


def _write_chains(path, chain: carbayes.CarChain):
    cols = list(chain.column_names) + ["tau2", "rho_S", "rho_T"]
    with Path(path).open("w") as fh:
        fh.write(",".join(["sample"] + cols) + "\n")
        for i in range(chain.n_samples):
            vals = list(chain.beta[i]) + [chain.tau2[i], chain.rho_s[i], chain.rho_t[i]]
            fh.write(",".join([str(i)] + [fmt(v) for v in vals]) + "\n")


def _emit_forecast(run: Run, args, panel, fc):
    write_forecast(fc, run.path("forecast.csv"))
    run.wrote("forecast.csv")
    if not args.no_figures:
        from . import plotting
        run.wrote(plotting.forecast_figure(panel, fc, run.path("forecast.png")))
    run.results["forecast_horizon"] = fc.horizon


def cmd_forecast(args, cfg: RunConfig) -> int:
    if args.horizon < 1:
        raise ConfigError("--horizon must be >= 1")
    panel, adj, pops, covs = _load_inputs(cfg)
    run = Run(args, cfg, _prepare_out(cfg, args.dry_run))
    options = getattr(cfg, args.model, {}) if args.model != "persistence" else {}
    if args.dry_run:
        return 0
    fm = bench.fit_model(args.model, options, panel, adj, population_fractions(pops), covs, seed=cfg.seed)
    fc = fm.forecast(args.horizon, cfg.seed)
    run.results = {"model": args.model, "measures": fm.measures}
    _emit_forecast(run, args, panel, fc)
    run.finish()
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    if not args.config:
        raise ConfigError("bench needs --config")
    path = Path(args.config)
    try:
        with path.open() as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    out = Path(args.out) if args.out else (path.parent / raw["out"] if "out" in raw else None)
    if out is None:
        raise ConfigError("--out is required")
    raw = {k: v for k, v in raw.items() if k != "out"}
    for k in ("panel", "adjacency", "populations"):
        if k not in raw:
            raise ConfigError(f"bench config is missing {k!r}")
        if not (path.parent / raw[k]).is_file():
            raise ConfigError(f"{k} file not found: {path.parent / raw[k]}")
    try:
        bcfg = bench.config_from_dict(raw, base=path.parent, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run = Run(args, None, out)
    run.cfg = RunConfig(seed=bcfg.seed, out=out)
    if args.dry_run:
        return 0
    report = bench.run_benchmark(bcfg)
    for p in report.write(out, figures=not args.no_figures):
        run.wrote(p)
    run.results = report.to_dict()
    run.finish()
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmts = ", ".join(f"{k} v{v}" for k, v in FORMAT_VERSIONS.items())
    p = argparse.ArgumentParser(prog="stcount", description="Spatio-temporal count models and benchmarks.")
    p.add_argument("--version", action="version", version=f"stcount {__version__} ({fmts})")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its fields")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (prefix for simulate)")
    common.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--panel")
    data.add_argument("--adjacency")
    data.add_argument("--populations")
    data.add_argument("--covariate", action="append", metavar="NAME=FILE[:LAG[:SMOOTH]]")

    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sp = sub.add_parser("preprocess", parents=[common, data], help="smoothing, correlogram, incidence")
    sp.add_argument("--window", type=int)
    sp.add_argument("--max-lag", type=int, dest="max_lag")
    sp.add_argument("--positives", help="covariate used as the leading series")

    sp = sub.add_parser("simulate", parents=[common], help="simulate a panel from a scenario file")
    sp.add_argument("--generator", choices=("ee", "car"))
    sp.add_argument("--scenario")

    sp = sub.add_parser("fit-ee", parents=[common, data], help="fit an endemic-epidemic model")
    sp.add_argument("--family", choices=("poisson", "negbin1", "negbinm"))
    sp.add_argument("--endemic-covariates", dest="endemic_covariates")
    sp.add_argument("--per-region-intercepts", dest="per_region_intercepts")
    sp.add_argument("--harmonics", help="e.g. nu=1,phi=1")
    sp.add_argument("--components", help="subset of endemic,own,neighbours")

    sp = sub.add_parser("fit-mcglm", parents=[common, data], help="fit a multivariate covariance GLM")
    sp.add_argument("--power", type=float)
    sp.add_argument("--cov-link", dest="cov_link", choices=("identity", "exponential"))
    sp.add_argument("--components", help="subset of temporal,spatial")
    sp.add_argument("--covariates")
    sp.add_argument("--lag-transform", dest="lag_transform", choices=("identity", "log1p"))
    sp.add_argument("--lagged-neighbours", dest="lagged_neighbours", action="store_true")
    sp.add_argument("--forecast", type=int, help="forecast horizon in days")

    sp = sub.add_parser("fit-car", parents=[common, data], help="fit the CAR-AR(1) model by MCMC")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--burnin", type=int)
    sp.add_argument("--thin", type=int)
    sp.add_argument("--chains", type=int)
    sp.add_argument("--covariates")
    sp.add_argument("--forecast", type=int, help="forecast horizon in days")
    sp.add_argument("--paper-approx", dest="paper_approx", action="store_true",
                    help="carry the last random-effect field forward instead of simulating it")

    sp = sub.add_parser("forecast", parents=[common, data], help="fit on the full panel and forecast")
    sp.add_argument("--model", choices=("ee", "mcglm", "car", "persistence"), required=True)
    sp.add_argument("--horizon", type=int, default=5)

    sub.add_parser("bench", parents=[common], help="hold-out benchmark from a config file")
    return p


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "simulate": cmd_simulate,
    "fit-ee": lambda a, c: _fit_command(a, c, "ee"),
    "fit-mcglm": lambda a, c: _fit_command(a, c, "mcglm"),
    "fit-car": lambda a, c: _fit_command(a, c, "car"),
    "forecast": cmd_forecast,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = None if args.command in ("bench", "simulate") else resolve_config(args)
        if cfg is None:
            cfg = RunConfig(seed=args.seed or 0)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"stcount: error: {exc}", file=sys.stderr)
        return 2
    except StcountError as exc:
        print(f"stcount: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
