"""Bayesian Poisson log-linear model with CAR-AR(1) spatio-temporal random effects.

    y_kt ~ Poisson(mu_kt),  log mu_kt = x_kt' beta + offset_k + phi_kt
    phi_1 ~ N(0, tau2 Q^-1),  phi_t | phi_t-1 ~ N(rho_T phi_t-1, tau2 Q^-1)
    Q = rho_S (diag(W 1) - W) + (1 - rho_S) I

Priors: beta ~ N(0, sigma_beta2 I), tau2 ~ InverseGamma(a, b),
rho_S, rho_T ~ Uniform(0, 1). Inference is Metropolis-within-Gibbs.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, gammaln, logit

from .core import Adjacency, CountPanel, DataError, ForecastSet, OffsetSpec, StcountError

log = logging.getLogger(__name__)

BLOCKS = ("beta", "phi", "tau2", "rho_s", "rho_t")
_TUNE_EVERY = 50


class CarError(StcountError):
    pass


def leroux_precision(adjacency: Adjacency | np.ndarray, rho_s: float) -> np.ndarray:
    """``rho_S (diag(W 1) - W) + (1 - rho_S) I``."""
    if not (0.0 <= rho_s <= 1.0):
        raise ValueError(f"rho_s must lie in [0, 1], got {rho_s}")
    w = np.asarray(adjacency.w if isinstance(adjacency, Adjacency) else adjacency, dtype=float)
    return rho_s * (np.diag(w.sum(axis=1)) - w) + (1.0 - rho_s) * np.eye(len(w))


@dataclass(frozen=True)
class CarSpec:
    """Model, priors and MCMC settings.

    ``design`` is K x N x q with the intercept (if any) in column 0;
    ``offset`` is the per-region log population fraction.
    """

    design: np.ndarray
    offset: np.ndarray
    adjacency: Adjacency
    column_names: tuple = ()
    sigma_beta2: float = 1e5
    a: float = 1.0
    b: float = 0.01
    iterations: int = 60000
    burnin: int = 1000
    thin: int = 10
    start_day: int = 0

    def __post_init__(self):
        X = np.asarray(self.design, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        K = self.adjacency.K
        if X.shape[0] != K:
            raise ValueError("design does not match the adjacency")
        if not np.all(np.isfinite(X)):
            raise DataError("design contains missing values")
        off = np.broadcast_to(np.asarray(self.offset, dtype=float), (K,)).copy()
        if self.a <= 0 or self.b <= 0 or self.sigma_beta2 <= 0:
            raise ValueError("prior hyperparameters must be positive")
        if self.thin < 1 or self.burnin < 0:
            raise ValueError("need thin >= 1 and burnin >= 0")
        names = tuple(self.column_names) or tuple(f"beta{j}" for j in range(X.shape[2]))
        if len(names) != X.shape[2]:
            raise ValueError("column_names does not match the design")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "column_names", names)

    @property
    def K(self) -> int:
        return self.design.shape[0]

    @property
    def N(self) -> int:
        return self.design.shape[1]

    @property
    def q(self) -> int:
        return self.design.shape[2]

    @property
    def has_intercept(self) -> bool:
        return bool(np.all(self.design[:, :, 0] == 1.0))

    @property
    def n_samples(self) -> int:
        return max(self.iterations - self.burnin, 0) // self.thin


@dataclass(frozen=True)
class CarState:
    beta: np.ndarray
    phi: np.ndarray  # K x N
    tau2: float
    rho_s: float
    rho_t: float


@dataclass(frozen=True)
class CarChain:
    beta: np.ndarray  # S x q
    phi: np.ndarray  # S x K x N
    tau2: np.ndarray
    rho_s: np.ndarray
    rho_t: np.ndarray
    acceptance: dict
    column_names: tuple = ()

    @property
    def n_samples(self) -> int:
        return len(self.tau2)

    def state(self, i: int) -> CarState:
        return CarState(self.beta[i], self.phi[i], float(self.tau2[i]), float(self.rho_s[i]),
                        float(self.rho_t[i]))


class PosteriorSummary(NamedTuple):
    median: float
    lo95: float
    hi95: float


# -- densities -------------------------------------------------------------------

def _laplacian_eigs(adjacency: Adjacency) -> np.ndarray:
    w = adjacency.w.astype(float)
    return np.clip(np.linalg.eigvalsh(np.diag(w.sum(axis=1)) - w), 0.0, None)


def _logdet_q(eigs, rho_s) -> float:
    return float(np.sum(np.log(rho_s * eigs + 1.0 - rho_s)))


def _quad(Q, A, B=None):
    """Column-wise ``a_t' Q b_t``."""
    B = A if B is None else B
    return np.sum(A * (Q @ B), axis=0)


def _ar_ss(phi, Q, rho_t) -> float:
    e = phi.copy()
    e[:, 1:] -= rho_t * phi[:, :-1]
    return float(np.sum(_quad(Q, e)))


def car_prior_logdensity(phi, tau2, rho_s, rho_t, adjacency: Adjacency) -> float:
    """Log density of the AR(1)-CAR field prior."""
    phi = np.asarray(phi, dtype=float)
    K, N = phi.shape
    Q = leroux_precision(adjacency, rho_s)
    ld = _logdet_q(_laplacian_eigs(adjacency), rho_s)
    return float(N * (0.5 * ld - 0.5 * K * np.log(2 * np.pi * tau2)) - _ar_ss(phi, Q, rho_t) / (2 * tau2))


def _poisson_loglik(y, eta) -> float:
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


def car_log_target(state: CarState, spec: CarSpec, panel: CountPanel) -> float:
    """Unnormalised log posterior: Poisson likelihood, field prior and parameter priors."""
    if not (0 < state.rho_s < 1 and 0 < state.rho_t < 1 and state.tau2 > 0):
        return -np.inf
    y = _counts(spec, panel)
    eta = spec.design @ state.beta + spec.offset[:, None] + state.phi
    lp = _poisson_loglik(y, eta)
    lp += car_prior_logdensity(state.phi, state.tau2, state.rho_s, state.rho_t, spec.adjacency)
    lp += float(-0.5 * state.beta @ state.beta / spec.sigma_beta2
                - 0.5 * spec.q * np.log(2 * np.pi * spec.sigma_beta2))
    lp += float(spec.a * np.log(spec.b) - gammaln(spec.a) - (spec.a + 1) * np.log(state.tau2)
                - spec.b / state.tau2)
    return lp


def _counts(spec: CarSpec, panel: CountPanel) -> np.ndarray:
    spec.adjacency.check_regions(panel.regions)
    y = panel.values[:, spec.start_day:spec.start_day + spec.N].astype(float)
    if y.shape != (spec.K, spec.N):
        raise DataError("panel does not cover the design window")
    return y


# -- sampler ---------------------------------------------------------------------

def _chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain,))))


def _initial_state(spec: CarSpec, y) -> CarState:
    X = spec.design.reshape(-1, spec.q)
    off = np.repeat(spec.offset, spec.N)
    yy = y.reshape(-1)
    beta = np.linalg.lstsq(X, np.log(yy + 0.5) - off, rcond=None)[0]
    for _ in range(25):
        eta = np.clip(off + X @ beta, -30, 30)
        mu = np.exp(eta)
        z = eta - off + (yy - mu) / mu
        sw = np.sqrt(mu)
        new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        done = np.max(np.abs(new - beta)) < 1e-8
        beta = new
        if done:
            break
    resid = np.log(y + 0.5) - (spec.design @ beta + spec.offset[:, None])
    tau2 = float(max(np.var(resid), 0.01))
    return CarState(beta, np.zeros((spec.K, spec.N)), tau2, 0.5, 0.5)


class _Sampler:
    def __init__(self, spec: CarSpec, y, state: CarState, rng, update):
        self.spec, self.y, self.rng = spec, y, rng
        self.update = update
        self.beta = np.array(state.beta, dtype=float)
        self.phi = np.array(state.phi, dtype=float)
        self.tau2, self.rho_s, self.rho_t = float(state.tau2), float(state.rho_s), float(state.rho_t)
        self.eigs = _laplacian_eigs(spec.adjacency)
        self.X = spec.design
        self.lin = self.X @ self.beta + spec.offset[:, None]  # eta without phi
        self.scale = {"beta": 1.0, "phi": 1.0, "rho_s": 1.0, "rho_t": 1.0}
        self.acc = {b: [0, 0] for b in self.scale}
        self.recentre = "phi" in update and spec.has_intercept
        self._beta_chol()
        self._phi_chol()

    def Q(self, rho_s=None):
        return leroux_precision(self.spec.adjacency, self.rho_s if rho_s is None else rho_s)

    def _beta_chol(self):
        mu = np.exp(self.lin + self.phi).reshape(-1)
        Xf = self.X.reshape(-1, self.spec.q)
        info = Xf.T @ (mu[:, None] * Xf) + np.eye(self.spec.q) / self.spec.sigma_beta2
        self.beta_L = np.linalg.cholesky(np.linalg.inv(info)) / np.sqrt(self.spec.q)

    def _phi_chol(self):
        N = self.spec.N
        Q = self.Q()
        mu = np.exp(self.lin + self.phi)
        c = 1.0 + self.rho_t ** 2 * (np.arange(N) < N - 1)
        prec = c[:, None, None] * Q[None] / self.tau2 + np.einsum("kt,kj->tkj", mu, np.eye(self.spec.K))
        self.phi_L = np.linalg.cholesky(np.linalg.inv(prec))  # N x K x K

    def _mh(self, block, log_ratio):
        ok = np.log(self.rng.uniform(size=np.shape(log_ratio))) < log_ratio
        self.acc[block][0] += int(np.sum(ok))
        self.acc[block][1] += int(np.size(ok))
        return ok

    def step_beta(self):
        prop = self.beta + self.scale["beta"] * self.beta_L @ self.rng.standard_normal(self.spec.q)
        lin_p = self.X @ prop + self.spec.offset[:, None]
        eta, eta_p = self.lin + self.phi, lin_p + self.phi
        r = np.sum(self.y * (eta_p - eta) - np.exp(eta_p) + np.exp(eta))
        r += (self.beta @ self.beta - prop @ prop) / (2 * self.spec.sigma_beta2)
        if self._mh("beta", r):
            self.beta, self.lin = prop, lin_p

    def step_phi(self):
        N = self.spec.N
        Q = self.Q()
        for parity in (0, 1):
            t = np.arange(parity, N, 2)
            cur = self.phi[:, t]
            z = self.rng.standard_normal((len(t), self.spec.K, 1))
            prop = cur + self.scale["phi"] * (self.phi_L[t] @ z)[:, :, 0].T
            m = np.zeros_like(cur)
            has_prev = t >= 1
            has_next = t < N - 1
            m[:, has_prev] += self.phi[:, t[has_prev] - 1]
            m[:, has_next] += self.phi[:, t[has_next] + 1]
            c = 1.0 + self.rho_t ** 2 * has_next

            def logc(p):
                eta = self.lin[:, t] + p
                lik = np.sum(self.y[:, t] * eta - np.exp(eta), axis=0)
                return lik - (c * _quad(Q, p) - 2 * self.rho_t * _quad(Q, p, m)) / (2 * self.tau2)

            ok = self._mh("phi", logc(prop) - logc(cur))
            self.phi[:, t[ok]] = prop[:, ok]

    def ss(self, rho_s=None, rho_t=None):
        return _ar_ss(self.phi, self.Q(rho_s), self.rho_t if rho_t is None else rho_t)

    def step_tau2(self):
        shape = self.spec.a + 0.5 * self.spec.K * self.spec.N
        rate = self.spec.b + 0.5 * self.ss()
        self.tau2 = float(rate / self.rng.gamma(shape))

    def step_rho_s(self):
        e = self.phi.copy()
        e[:, 1:] -= self.rho_t * self.phi[:, :-1]
        w = self.spec.adjacency.w.astype(float)
        sl = float(np.sum(_quad(np.diag(w.sum(axis=1)) - w, e)))
        si = float(np.sum(e * e))
        N = self.spec.N

        def target(rho):
            return (0.5 * N * _logdet_q(self.eigs, rho) - (rho * sl + (1 - rho) * si) / (2 * self.tau2)
                    + np.log(rho) + np.log1p(-rho))

        self.rho_s = self._logit_rw("rho_s", self.rho_s, target)

    def step_rho_t(self):
        Q = self.Q()
        A = float(np.sum(_quad(Q, self.phi)))
        B = float(np.sum(_quad(Q, self.phi[:, 1:], self.phi[:, :-1])))
        C = float(np.sum(_quad(Q, self.phi[:, :-1])))

        def target(rho):
            return -(A - 2 * rho * B + rho * rho * C) / (2 * self.tau2) + np.log(rho) + np.log1p(-rho)

        self.rho_t = self._logit_rw("rho_t", self.rho_t, target)

    def _logit_rw(self, block, rho, target):
        x = logit(rho) + self.scale[block] * self.rng.standard_normal()
        prop = float(expit(x))
        if not (0.0 < prop < 1.0):
            self._mh(block, -np.inf)
            return rho
        return prop if self._mh(block, target(prop) - target(rho)) else rho

    def do_recentre(self):
        m = self.phi.mean()
        self.phi -= m
        self.beta[0] += m
        self.lin = self.lin + m

    def sweep(self):
        if "beta" in self.update:
            self.step_beta()
        if "phi" in self.update:
            self.step_phi()
        if "tau2" in self.update:
            self.step_tau2()
        if "rho_s" in self.update:
            self.step_rho_s()
        if "rho_t" in self.update:
            self.step_rho_t()
        if self.recentre:
            self.do_recentre()

    def tune(self):
        for b, (a, n) in self.acc.items():
            if n == 0:
                continue
            r = a / n
            if r < 0.2:
                self.scale[b] *= 0.7
            elif r > 0.5:
                self.scale[b] *= 1.4
        self.reset_counts()
        if "beta" in self.update:
            self._beta_chol()
        if "phi" in self.update:
            self._phi_chol()

    def reset_counts(self):
        self.acc = {b: [0, 0] for b in self.scale}


def car_mcmc(spec: CarSpec, panel: CountPanel, *, seed: int = 0, chain: int = 0,
             init: CarState | None = None, update=BLOCKS) -> CarChain:
    """Run one Metropolis-within-Gibbs chain.

    ``update`` lists the blocks that are sampled; the others stay at their
    ``init`` values. Proposal scales are tuned during burn-in towards
    acceptance 0.2-0.5 and frozen afterwards.
    """
    n_keep = spec.n_samples
    if n_keep <= 0:
        raise CarError("empty chain requested")
    update = frozenset(update)
    unknown = update - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown update blocks {sorted(unknown)}")
    y = _counts(spec, panel)
    state = init or _initial_state(spec, y)
    s = _Sampler(spec, y, state, _chain_rng(seed, chain), update)

    S = n_keep
    out_beta = np.empty((S, spec.q))
    out_phi = np.empty((S, spec.K, spec.N))
    out_tau2, out_rs, out_rt = np.empty(S), np.empty(S), np.empty(S)
    j = 0
    for it in range(spec.burnin + S * spec.thin):
        s.sweep()
        if it < spec.burnin:
            if (it + 1) % _TUNE_EVERY == 0:
                s.tune()
            continue
        if (it - spec.burnin + 1) % spec.thin == 0:
            out_beta[j], out_phi[j] = s.beta, s.phi
            out_tau2[j], out_rs[j], out_rt[j] = s.tau2, s.rho_s, s.rho_t
            j += 1
    acc = {b: (a / n if n else float("nan")) for b, (a, n) in s.acc.items() if b in update}
    return CarChain(out_beta, out_phi, out_tau2, out_rs, out_rt, acc, spec.column_names)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("STCOUNT_THREADS", "1")))
    except ValueError:
        return 1


def car_mcmc_chains(spec: CarSpec, panel: CountPanel, n_chains: int, *, seed: int = 0, **kw) -> list:
    """Independent chains with per-chain RNG streams; results do not depend on scheduling."""
    with ThreadPoolExecutor(max_workers=min(n_chains, _threads())) as ex:
        futs = [ex.submit(car_mcmc, spec, panel, seed=seed, chain=c, **kw) for c in range(n_chains)]
        return [f.result() for f in futs]


def merge_chains(chains) -> CarChain:
    chains = list(chains)
    if not chains:
        raise CarError("no chains to merge")
    cat = lambda name: np.concatenate([getattr(c, name) for c in chains])
    acc = {b: float(np.mean([c.acceptance[b] for c in chains])) for b in chains[0].acceptance}
    return CarChain(cat("beta"), cat("phi"), cat("tau2"), cat("rho_s"), cat("rho_t"), acc,
                    chains[0].column_names)


# -- summaries -------------------------------------------------------------------

def _summ(x) -> PosteriorSummary:
    lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
    return PosteriorSummary(float(med), float(lo), float(hi))


def summarize(chain: CarChain) -> dict:
    """Median and central 95% interval for beta, tau2, rho_S and rho_T."""
    if chain.n_samples == 0:
        raise CarError("empty chain")
    out = {n: _summ(chain.beta[:, j]) for j, n in enumerate(chain.column_names)}
    out["tau2"] = _summ(chain.tau2)
    out["rho_S"] = _summ(chain.rho_s)
    out["rho_T"] = _summ(chain.rho_t)
    return out


def sample_means(chain: CarChain, spec: CarSpec) -> np.ndarray:
    """Fitted means for every retained sample (S x K x N)."""
    lin = np.einsum("knq,sq->skn", spec.design, chain.beta)
    return np.exp(lin + spec.offset[None, :, None] + chain.phi)


def fitted_means(chain: CarChain, spec: CarSpec) -> np.ndarray:
    return sample_means(chain, spec).mean(axis=0)


def _deviance(y, mu) -> float:
    return float(-2.0 * np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))


def car_dic(chain: CarChain, spec: CarSpec, panel: CountPanel):
    """``(DIC, pd)`` with ``pd = mean D - D(posterior-mean fitted means)``."""
    if chain.n_samples == 0:
        raise CarError("empty chain")
    y = _counts(spec, panel)
    mus = sample_means(chain, spec)
    dbar = float(np.mean([_deviance(y, m) for m in mus]))
    pd = dbar - _deviance(y, mus.mean(axis=0))
    return dbar + pd, pd


def car_forecast(chain: CarChain, spec: CarSpec, panel: CountPanel, horizon: int, design_future,
                 *, mode: str = "ar", rng=None, dates=None) -> ForecastSet:
    """Posterior-predictive forecast for the ``horizon`` days after the design window.

    ``mode="ar"`` draws the field forward per sample; ``mode="paper-approx"``
    carries the last field value forward unchanged. The mean is the
    average of the per-sample Poisson means; median and interval come from
    the simulated counts.
    """
    if mode not in ("ar", "paper-approx"):
        raise ValueError("mode must be 'ar' or 'paper-approx'")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    Xf = np.asarray(design_future, dtype=float)
    if Xf.ndim == 2:
        Xf = Xf[:, :, None]
    if Xf.shape[0] != spec.K or Xf.shape[2] != spec.q or Xf.shape[1] < horizon:
        raise DataError(f"future design covers {Xf.shape[1]} days, horizon is {horizon}")
    if not np.all(np.isfinite(Xf[:, :horizon])):
        raise DataError("missing covariate values in the forecast window")
    rng = rng if rng is not None else np.random.default_rng(0)
    S = chain.n_samples
    w = spec.adjacency.w.astype(float)
    lap = np.diag(w.sum(axis=1)) - w
    ell, U = np.linalg.eigh(lap)
    ell = np.clip(ell, 0.0, None)
    phi = chain.phi[:, :, -1].copy()  # S x K
    mu = np.empty((S, spec.K, horizon))
    for h in range(horizon):
        if mode == "ar":
            d = np.sqrt(chain.tau2[:, None] / (chain.rho_s[:, None] * ell + 1.0 - chain.rho_s[:, None]))
            z = rng.standard_normal((S, spec.K)) * d
            phi = chain.rho_t[:, None] * phi + z @ U.T
        lin = Xf[:, h, :] @ chain.beta.T  # K x S
        mu[:, :, h] = np.exp(lin.T + spec.offset[None, :] + phi)
    ydraw = rng.poisson(mu)
    mean = mu.mean(axis=0)
    med, lo, hi = (np.quantile(ydraw, p, axis=0, method="inverted_cdf") for p in (0.5, 0.025, 0.975))
    if dates is None:
        dates = panel.future_dates(horizon)
    return ForecastSet(panel.regions, list(dates)[:horizon], mean, med, lo, hi)


# -- panel helpers ---------------------------------------------------------------

def car_design_for(panel: CountPanel, covariates=(), start: int | None = None, stop: int | None = None):
    """Intercept plus covariate columns over days ``start..stop-1`` (K x T x q) and names."""
    covariates = tuple(covariates)
    t0 = max([0] + [c.first_valid for c in covariates]) if start is None else start
    t1 = panel.N if stop is None else stop
    for c in covariates:
        if t1 > c.length:
            raise DataError(f"covariate {c.name!r} is only known for {c.length} days")
        c.check_defined(t0, t1, regions=panel.regions, dates=None)
    cols = [np.ones((panel.K, t1 - t0))] + [c.values[:, t0:t1] for c in covariates]
    return np.stack(cols, axis=-1), ("intercept",) + tuple(c.name for c in covariates), t0


def spec_for_panel(panel: CountPanel, adjacency: Adjacency, offset: OffsetSpec, covariates=(), **kw) -> CarSpec:
    adjacency.check_regions(panel.regions)
    X, names, t0 = car_design_for(panel, covariates)
    return CarSpec(X, offset.log_fractions, adjacency, column_names=names, start_day=t0, **kw)


def forecast_panel(chain: CarChain, spec: CarSpec, panel: CountPanel, covariates, horizon: int, **kw):
    """Forecast the ``horizon`` days following ``panel``, taking future covariates from ``covariates``."""
    N = panel.N
    Xf, _, _ = car_design_for(panel, covariates, start=N, stop=N + horizon) if covariates else (
        np.ones((panel.K, horizon, 1)), None, None)
    return car_forecast(chain, spec, panel, horizon, Xf, **kw)


def fit_report(chain: CarChain, spec: CarSpec, panel: CountPanel) -> dict:
    dic, pd = car_dic(chain, spec, panel)
    return {
        "model": "car",
        "summary": {k: v._asdict() for k, v in summarize(chain).items()},
        "DIC": dic, "pd": pd,
        "acceptance": chain.acceptance,
        "n_samples": chain.n_samples,
        "mcmc": {"iterations": spec.iterations, "burnin": spec.burnin, "thin": spec.thin},
    }
