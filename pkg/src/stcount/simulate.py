"""Synthetic panels from the endemic-epidemic and CAR-AR(1) Poisson processes.

All generators are pure functions of the scenario (including its seed).
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (Adjacency, CountPanel, CovariatePanel, DataError, StcountError,
                   population_fractions, row_normalize)
from .ee import EEParams, EESpec, _component_features, _split_coefs, pack

EIGHT_REGIONS = tuple("ABCDEFGH")
EIGHT_W = np.array([
    [0, 1, 0, 0, 0, 0, 0, 0],
    [1, 0, 1, 1, 0, 0, 0, 0],
    [0, 1, 0, 1, 1, 1, 1, 0],
    [0, 1, 1, 0, 1, 1, 1, 1],
    [0, 0, 1, 1, 0, 1, 1, 1],
    [0, 0, 1, 1, 1, 0, 1, 1],
    [0, 0, 1, 1, 1, 1, 0, 0],
    [0, 0, 0, 1, 1, 1, 0, 0],
])


class ExplosiveSimulation(StcountError):
    pass


def eight_region_adjacency() -> Adjacency:
    """The 8-department illustration adjacency (regions A..H)."""
    return Adjacency(EIGHT_REGIONS, EIGHT_W)


def default_dates(N: int, start=dt.date(2020, 6, 28)) -> list:
    return [start + dt.timedelta(days=i) for i in range(N)]


@dataclass(frozen=True)
class CovariateGenerator:
    """Smooth seasonal wave plus Gaussian noise, one phase per region."""

    amplitude: float = 1.0
    period: float = 60.0
    noise: float = 0.1
    level: float = 0.0

    def draw(self, K: int, N: int, rng) -> np.ndarray:
        t = np.arange(N)
        phase = rng.uniform(0, 2 * np.pi, size=(K, 1))
        wave = self.level + self.amplitude * np.sin(2 * np.pi * t / self.period + phase)
        return wave + self.noise * rng.standard_normal((K, N))


@dataclass(frozen=True)
class SimScenario:
    generator: str  # "ee" or "car"
    K: int
    N: int
    adjacency: Adjacency
    populations: np.ndarray
    seed: int = 0
    ee_params: EEParams | None = None
    family: str = "poisson"
    per_region: frozenset = frozenset()
    n_covariates: int = 0
    covariates: CovariateGenerator = field(default_factory=CovariateGenerator)
    # CAR-AR(1) truth
    beta: tuple = (0.0,)
    tau2: float = 0.1
    rho_s: float = 0.5
    rho_t: float = 0.5
    start: dt.date = dt.date(2020, 6, 28)

    def __post_init__(self):
        if self.generator not in ("ee", "car"):
            raise ValueError("generator must be 'ee' or 'car'")
        if self.adjacency.K != self.K:
            raise ValueError("adjacency size does not match K")
        object.__setattr__(self, "populations", np.asarray(self.populations, dtype=float))

    @property
    def regions(self) -> tuple:
        return self.adjacency.regions

    def rng(self):
        return np.random.default_rng(self.seed)


def _covariate_panels(scn: SimScenario, rng, n: int) -> list:
    out = []
    for j in range(n):
        raw = scn.covariates.draw(scn.K, scn.N, rng)
        out.append(CovariatePanel(f"x{j + 1}", raw, lag=0, first_valid=0, regions=scn.regions,
                                  start=scn.start))
    return out


def ee_spec_for(scn: SimScenario, covariates) -> EESpec:
    p = scn.ee_params
    comps = [c for c, a in (("endemic", p.alpha_nu), ("own", p.alpha_lambda),
                            ("neighbours", p.alpha_phi)) if a is not None]
    return EESpec(scn.adjacency, population_fractions(scn.populations), family=scn.family,
                  endemic_covariates=tuple(covariates), per_region=scn.per_region,
                  components=frozenset(comps))


class _EEProcess:
    """Per-day rates of a fitted or true EE model, shared by the panel and one-step simulators."""

    def __init__(self, spec: EESpec, params: EEParams, N: int):
        theta = pack(params, spec)
        feats = _component_features(spec, np.arange(N))
        coefs, log_psi = _split_coefs(theta, feats, spec.family)
        self.rate = {c: np.exp(np.tensordot(coefs[c], feats[c], axes=1)) for c in feats}
        self.family = spec.family
        self.size = None if spec.family == "poisson" else np.broadcast_to(np.exp(-log_psi), (spec.K,))
        self.e = spec.offset.fractions
        self.wn = row_normalize(spec.adjacency)
        self.K = spec.K

    def mean(self, prev, t):
        """Conditional means for day ``t``; ``prev`` is K or K x P."""
        prev = np.asarray(prev, dtype=float)
        col = (slice(None), t) + (None,) * (prev.ndim - 1)
        mu = np.zeros_like(prev)
        if "endemic" in self.rate:
            mu = mu + (self.e[:, None] if prev.ndim > 1 else self.e) * self.rate["endemic"][col]
        if "own" in self.rate:
            mu = mu + self.rate["own"][col] * prev
        if "neighbours" in self.rate:
            mu = mu + self.rate["neighbours"][col] * (self.wn @ prev)
        return mu

    def draw(self, mu, t, rng):
        if not np.all(np.isfinite(mu)) or np.max(mu) > 1e9:
            raise ExplosiveSimulation(f"conditional mean exceeds 1e9 on day {t}")
        if self.family == "poisson":
            return rng.poisson(mu)
        size = self.size if mu.ndim == 1 else self.size[:, None]
        return rng.poisson(rng.gamma(size, mu / size))


def simulate_ee(scn: SimScenario):
    """Draw a panel from the endemic-epidemic process.

    Day 0 comes from the endemic-only mean; afterwards each day is drawn
    given the previous one. NegBin counts use a gamma-Poisson mixture with
    size ``1/psi``. Returns ``(panel, covariates, spec)``.
    """
    if scn.ee_params is None:
        raise ValueError("ee scenario needs ee_params")
    rng = scn.rng()
    covs = _covariate_panels(scn, rng, scn.n_covariates)
    spec = ee_spec_for(scn, covs)
    K, N = scn.K, scn.N
    proc = _EEProcess(spec, scn.ee_params, N)
    y = np.zeros((K, N), dtype=np.int64)
    y[:, 0] = proc.draw(proc.mean(np.zeros(K), 0), 0, rng)  # lagged terms vanish
    for t in range(1, N):
        y[:, t] = proc.draw(proc.mean(y[:, t - 1], t), t, rng)
    panel = CountPanel(scn.regions, default_dates(N, scn.start), y)
    return panel, covs, spec


def simulate_ee_day(spec: EESpec, params: EEParams, y_prev, t: int, n: int, rng) -> np.ndarray:
    """``n`` independent draws (K x n) of day ``t`` given the previous day's counts."""
    proc = _EEProcess(spec, params, t + 1)
    prev = np.repeat(np.asarray(y_prev, dtype=float)[:, None], n, axis=1)
    return proc.draw(proc.mean(prev, t), t, rng)


def leroux_precision_matrix(w, rho_s: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return rho_s * (np.diag(w.sum(axis=1)) - w) + (1.0 - rho_s) * np.eye(len(w))


def simulate_car_field(w, N, tau2, rho_s, rho_t, rng) -> np.ndarray:
    """AR(1) sequence of CAR fields: phi_1 ~ N(0, tau2 Q^-1), phi_t | phi_t-1 ~ N(rho_t phi_t-1, tau2 Q^-1)."""
    if not (0 <= rho_s < 1):
        raise DataError("rho_s must lie in [0, 1): Q is singular at 1")
    if not (0 <= rho_t < 1) or tau2 <= 0:
        raise DataError("need 0 <= rho_t < 1 and tau2 > 0")
    Q = leroux_precision_matrix(w, rho_s)
    L = np.linalg.cholesky(tau2 * np.linalg.inv(Q))
    K = Q.shape[0]
    phi = np.zeros((K, N))
    phi[:, 0] = L @ rng.standard_normal(K)
    for t in range(1, N):
        phi[:, t] = rho_t * phi[:, t - 1] + L @ rng.standard_normal(K)
    return phi


def car_design(covariates, K: int, N: int) -> np.ndarray:
    """Intercept plus covariate columns as a K x N x q array."""
    cols = [np.ones((K, N))] + [np.asarray(c.values if hasattr(c, "values") else c)[:, :N] for c in covariates]
    return np.stack(cols, axis=-1)


def simulate_car(scn: SimScenario):
    """Draw a panel from the Poisson log-linear model with CAR-AR(1) effects.

    Returns ``(panel, covariates, phi)``; ``phi`` is the latent K x N field.
    """
    rng = scn.rng()
    K, N = scn.K, scn.N
    beta = np.asarray(scn.beta, dtype=float)
    covs = _covariate_panels(scn, rng, beta.size - 1)
    X = car_design(covs, K, N)
    offset = np.log(population_fractions(scn.populations).fractions)
    phi = simulate_car_field(scn.adjacency.w, N, scn.tau2, scn.rho_s, scn.rho_t, rng)
    eta = X @ beta + offset[:, None] + phi
    if np.max(eta) > np.log(1e9):
        raise ExplosiveSimulation("Poisson mean exceeds 1e9")
    y = rng.poisson(np.exp(eta))
    panel = CountPanel(scn.regions, default_dates(N, scn.start), y)
    return panel, covs, phi


def inject_weekday_artifact(panel: CountPanel, multipliers) -> CountPanel:
    """Scale each day by its weekday multiplier (Monday first) and round half up."""
    m = np.asarray(multipliers, dtype=float)
    if m.shape != (7,) or np.any(m < 0):
        raise ValueError("need 7 non-negative weekday multipliers")
    factor = np.array([m[d.weekday()] for d in panel.dates])
    vals = np.floor(panel.values * factor[None, :] + 0.5).astype(np.int64)
    return CountPanel(panel.regions, panel.dates, vals)


# -- scenario files --------------------------------------------------------------

def scenario_from_dict(cfg: dict, seed: int | None = None) -> SimScenario:
    """Build a scenario from the JSON layout used by ``stcount simulate``."""
    gen = cfg["generator"]
    if "adjacency" in cfg and cfg["adjacency"] != "eight-region":
        adj = Adjacency(cfg["regions"], np.asarray(cfg["adjacency"]))
    else:
        adj = eight_region_adjacency()
    K = adj.K
    pops = np.asarray(cfg.get("populations", [100000.0] * K), dtype=float)
    covgen = CovariateGenerator(**cfg.get("covariate_generator", {}))
    kw = dict(generator=gen, K=K, N=int(cfg["N"]), adjacency=adj, populations=pops,
              seed=int(cfg.get("seed", 0) if seed is None else seed), covariates=covgen)
    if "start" in cfg:
        kw["start"] = dt.date.fromisoformat(cfg["start"])
    if gen == "ee":
        p = cfg["params"]
        kw.update(
            family=cfg.get("family", "poisson"),
            per_region=frozenset(cfg.get("per_region", ())),
            n_covariates=len(p.get("beta", [])),
            ee_params=EEParams.from_natural(nu=p.get("nu"), lam=p.get("lambda"), phi=p.get("phi"),
                                            beta=p.get("beta", []), psi=p.get("psi")),
        )
    else:
        p = cfg["params"]
        kw.update(beta=tuple(p["beta"]), tau2=float(p["tau2"]), rho_s=float(p["rho_s"]),
                  rho_t=float(p["rho_t"]))
    return SimScenario(**kw)


def load_scenario(path, seed: int | None = None) -> SimScenario:
    with Path(path).open() as fh:
        return scenario_from_dict(json.load(fh), seed=seed)
