"""Hold-out benchmark: split by date, fit each model on the training days,
forecast the held-out days and compare RMSEf / RMSEp against persistence."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import carbayes, ee, mcglm
from .core import (Adjacency, CountPanel, DataError, ForecastSet, OffsetSpec, StcountError, fmt,
                   load_adjacency, load_count_panel, load_covariate_table, load_populations,
                   population_fractions, write_forecast)
from .preprocess import align_covariate

log = logging.getLogger(__name__)

KINDS = ("ee", "mcglm", "car", "persistence")
PERSISTENCE = "persistence"


def split_train_test(panel: CountPanel, holdout_days: int):
    """Last ``holdout_days`` days become the test panel."""
    if holdout_days < 1:
        raise ValueError("holdout must be at least 1 day")
    if holdout_days >= panel.N:
        raise ValueError(f"holdout {holdout_days} must be smaller than N = {panel.N}")
    cut = panel.N - holdout_days
    if cut < 2:
        raise ValueError("training panel would have fewer than 2 days")
    return panel.slice_days(0, cut), panel.slice_days(cut, panel.N)


def rmse(observed, predicted) -> float:
    o = np.asarray(observed, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if o.shape != p.shape:
        raise ValueError(f"shape mismatch: {o.shape} vs {p.shape}")
    if o.size == 0 or not (np.all(np.isfinite(o)) and np.all(np.isfinite(p))):
        raise ValueError("rmse needs non-empty, complete inputs")
    return float(np.sqrt(np.mean((o - p) ** 2)))


@dataclass(frozen=True)
class ModelConfig:
    label: str
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model type {self.kind!r}; expected one of {KINDS}")
        check_options(self.kind, self.options, self.label)


@dataclass(frozen=True)
class BenchConfig:
    panel: CountPanel
    adjacency: Adjacency
    offset: OffsetSpec
    covariates: tuple = ()
    models: tuple = ()
    holdout: int = 5
    horizon: int | None = None
    seed: int = 0

    def __post_init__(self):
        h = self.holdout if self.horizon is None else self.horizon
        if not 1 <= h <= self.holdout:
            raise ValueError("horizon must be between 1 and the holdout length")
        object.__setattr__(self, "horizon", h)
        labels = [m.label for m in self.models]
        if len(set(labels)) != len(labels) or PERSISTENCE in labels:
            raise ValueError("model labels must be unique and not 'persistence'")
        self.adjacency.check_regions(self.panel.regions)

    def covariate(self, name):
        for c in self.covariates:
            if c.name == name:
                return c
        raise DataError(f"unknown covariate {name!r}")


@dataclass
class ModelResult:
    label: str
    kind: str
    measures: dict = field(default_factory=dict)
    rmse_f: float | None = None
    rmse_p: list | None = None
    rmse_p_pooled: float | None = None
    forecast: ForecastSet | None = None
    error: str | None = None
    runtime: float = 0.0


@dataclass
class BenchReport:
    results: list
    holdout: int
    horizon: int
    seed: int

    def result(self, label) -> ModelResult:
        return next(r for r in self.results if r.label == label)

    def to_dict(self) -> dict:
        # runtime is logged, not written, so reports are reproducible byte for byte
        models = []
        for r in self.results:
            models.append({
                "label": r.label, "type": r.kind,
                "measures": {k: float(v) for k, v in sorted(r.measures.items())},
                "RMSEf": r.rmse_f, "RMSEp": r.rmse_p, "RMSEp_pooled": r.rmse_p_pooled,
                "error": r.error,
            })
        return {"holdout": self.holdout, "horizon": self.horizon, "seed": self.seed, "models": models}

    def rows(self):
        out = []
        for r in self.results:
            for k, v in sorted(r.measures.items()):
                out.append((r.label, k, "", v))
            if r.rmse_f is not None:
                out.append((r.label, "RMSEf", "", r.rmse_f))
            if r.rmse_p is not None:
                out += [(r.label, "RMSEp", str(h + 1), v) for h, v in enumerate(r.rmse_p)]
                out.append((r.label, "RMSEp", "pooled", r.rmse_p_pooled))
        return out

    def write(self, outdir, figures: bool = True) -> list:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        written = [outdir / "report.json", outdir / "report.csv"]
        with written[0].open("w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with written[1].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "metric", "horizon", "value"])
            for label, metric, h, v in self.rows():
                w.writerow([label, metric, h, fmt(v)])
        for r in self.results:
            if r.forecast is not None:
                p = outdir / f"forecast_{_safe(r.label)}.csv"
                write_forecast(r.forecast, p)
                written.append(p)
        if figures:
            from .plotting import bench_figure
            written.append(bench_figure(self, outdir / "rmse_by_horizon.png"))
        return written


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def model_seed(base: int, label: str) -> int:
    """Per-model seed that does not depend on where the model sits in the config."""
    return (int(base) + zlib.crc32(label.encode())) % 2 ** 32


@dataclass
class FittedModel:
    """A fitted model with its fit measures, in-sample means and a forecaster."""

    label: str
    kind: str
    fit: object
    measures: dict
    fitted: np.ndarray  # K x T in-sample means
    t0: int  # panel day of fitted[:, 0]
    report: dict
    _forecast: object = None

    def forecast(self, horizon: int, seed: int = 0) -> ForecastSet:
        return self._forecast(horizon, seed)

    def rmse_f(self, panel: CountPanel) -> float:
        return rmse(panel.values[:, self.t0:self.t0 + self.fitted.shape[1]], self.fitted)


MODEL_OPTIONS = {
    "ee": ("covariates", "family", "per_region", "harmonics", "components", "n_paths"),
    "mcglm": ("covariates", "power", "cov_link", "components", "region_intercepts", "lagged_own",
              "lagged_neighbours", "lag_transform", "max_n", "max_iter", "tol"),
    "car": ("covariates", "iterations", "burnin", "thin", "a", "b", "sigma_beta2", "mode", "chains"),
    "persistence": (),
}


def check_options(kind: str, options: dict, label: str = "") -> None:
    extra = set(options) - set(MODEL_OPTIONS[kind])
    if extra:
        raise ValueError(f"model {label or kind!r}: unknown options {sorted(extra)}")


def _pick_covariates(options, covariates):
    by_name = {c.name: c for c in covariates}
    out = []
    for n in options.get("covariates", ()):
        if n not in by_name:
            raise DataError(f"unknown covariate {n!r}")
        out.append(by_name[n])
    return tuple(out)


def fit_model(kind: str, options: dict, panel: CountPanel, adjacency: Adjacency, offset: OffsetSpec,
              covariates=(), seed: int = 0, label: str | None = None) -> FittedModel:
    """Fit one model type from a plain options dict (the config-file vocabulary)."""
    label = label or kind
    check_options(kind, options, label)
    o = dict(options)
    covs = _pick_covariates(o, covariates)
    if kind == "persistence":
        def fc(h, _seed):
            mean = np.repeat(panel.values[:, -1:].astype(float), h, axis=1)
            return ForecastSet(panel.regions, panel.future_dates(h), mean, mean,
                               stats.poisson.ppf(0.025, mean), stats.poisson.ppf(0.975, mean))
        return FittedModel(label, kind, None, {}, panel.values[:, :-1].astype(float), 1,
                           {"model": "persistence"}, fc)
    if kind == "ee":
        spec = ee.EESpec(adjacency, offset, family=o.get("family", "poisson"), endemic_covariates=covs,
                         per_region=frozenset(o.get("per_region", ())), harmonics=o.get("harmonics", {}),
                         components=frozenset(o.get("components", ee.COMPONENTS)))
        fit = ee.ee_fit(spec, panel)
        ic = ee.ee_information_criteria(fit)
        n_paths = int(o.get("n_paths", 2000))
        return FittedModel(label, kind, fit, {"loglik": ic.loglik, "AIC": ic.aic, "BIC": ic.bic},
                           fit.fitted_means, fit.window[0], ee.fit_report(fit),
                           lambda h, sd: ee.ee_forecast(fit, panel, h, n_paths=n_paths, rng=sd))
    if kind == "mcglm":
        kw = {k: o[k] for k in MODEL_OPTIONS["mcglm"] if k in o and k != "covariates"}
        if "components" in kw:
            kw["components"] = tuple(kw["components"])
        fit = mcglm.fit_panel(panel, adjacency, offset, covs, **kw)
        return FittedModel(label, kind, fit, {"plogLik": fit.plogLik, "pAIC": fit.pAIC, "pBIC": fit.pBIC,
                                              "df": fit.df},
                           mcglm.fitted_matrix(fit), fit.layout.t0, mcglm.fit_report(fit),
                           lambda h, sd: mcglm.mcglm_forecast(fit, panel, h))
    if kind == "car":
        kw = {k: o[k] for k in ("iterations", "burnin", "thin", "a", "b", "sigma_beta2") if k in o}
        mode = o.get("mode", "ar")
        spec = carbayes.spec_for_panel(panel, adjacency, offset, covs, **kw)
        chain = carbayes.merge_chains(
            carbayes.car_mcmc_chains(spec, panel, int(o.get("chains", 1)), seed=seed))
        rep = carbayes.fit_report(chain, spec, panel)
        fitted = carbayes.fitted_means(chain, spec)
        return FittedModel(label, kind, (chain, spec), {"DIC": rep["DIC"], "pd": rep["pd"]}, fitted,
                           spec.start_day, rep,
                           lambda h, sd: carbayes.forecast_panel(chain, spec, panel, covs, h, mode=mode,
                                                                 rng=np.random.default_rng(sd)))
    raise ValueError(f"unknown model type {kind!r}")


def _run_one(cfg: BenchConfig, m: ModelConfig, train: CountPanel) -> ModelResult:
    t = time.perf_counter()
    seed = model_seed(cfg.seed, m.label)
    try:
        fm = fit_model(m.kind, m.options, train, cfg.adjacency, cfg.offset, cfg.covariates,
                       seed=seed, label=m.label)
        res = ModelResult(m.label, m.kind, measures=dict(fm.measures), rmse_f=fm.rmse_f(train),
                          forecast=fm.forecast(cfg.horizon, seed))
    except (StcountError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("model %s failed: %s", m.label, exc)
        res = ModelResult(m.label, m.kind, error=f"{type(exc).__name__}: {exc}")
    res.runtime = time.perf_counter() - t
    return res


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("STCOUNT_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(config: BenchConfig) -> BenchReport:
    """Fit, forecast and score every model; failures are recorded, not raised."""
    train, test = split_train_test(config.panel, config.holdout)
    H = config.horizon
    models = [ModelConfig(PERSISTENCE, PERSISTENCE)] + list(config.models)
    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        results = list(ex.map(lambda m: _run_one(config, m, train), models))
    obs = test.values[:, :H].astype(float)
    for r in results:
        if r.forecast is None:
            continue
        pred = np.asarray(r.forecast.mean)[:, :H]
        r.rmse_p = [rmse(obs[:, h], pred[:, h]) for h in range(H)]
        r.rmse_p_pooled = rmse(obs, pred)
        log.info("%s: RMSEf %.4g, RMSEp %.4g (%.2fs)", r.label, r.rmse_f, r.rmse_p_pooled, r.runtime)
    results.sort(key=lambda r: r.label)
    return BenchReport(results, config.holdout, H, config.seed)


# -- config files ----------------------------------------------------------------

def load_covariates(entries, panel: CountPanel, base: Path) -> tuple:
    """Read ``{"name", "file", "lag", "smooth"}`` entries into lagged surfaces."""
    out = []
    for e in entries:
        regions, dates, values = load_covariate_table(base / e["file"], panel.regions)
        out.append(align_covariate(e["name"], dates, values, panel, lag=int(e.get("lag", 0)),
                                   smooth=int(e.get("smooth", 1))))
    return tuple(out)


def config_from_dict(cfg: dict, base=".", seed: int | None = None) -> BenchConfig:
    base = Path(base)
    try:
        panel = load_count_panel(base / cfg["panel"])
        adj = load_adjacency(base / cfg["adjacency"])
        pops = load_populations(base / cfg["populations"], panel.regions)
        models = tuple(ModelConfig(m["label"], m["type"], {k: v for k, v in m.items()
                                                           if k not in ("label", "type")})
                       for m in cfg.get("models", ()))
    except KeyError as exc:
        raise ValueError(f"missing config field {exc.args[0]!r}") from None
    covs = load_covariates(cfg.get("covariates", ()), panel, base)
    return BenchConfig(panel, adj, population_fractions(pops), covs, models,
                       holdout=int(cfg.get("holdout", 5)), horizon=cfg.get("horizon"),
                       seed=int(cfg.get("seed", 0) if seed is None else seed))
