"""Endemic-epidemic count time series models.

The conditional mean of region ``k`` on day ``t`` is split into three parts::

    mu_kt = e_k * nu_kt  +  lambda_kt * y_k,t-1  +  phi_kt * sum_q w_qk y_q,t-1
            (endemic)       (own lag)               (neighbour lag)

with log-linear predictors for ``nu``, ``lambda`` and ``phi`` and ``w`` the
normalised adjacency weights. Counts are Poisson or negative binomial with
``Var = mu (1 + psi mu)``; ``psi`` is shared (``negbin1``) or per region
(``negbinm``).

Parameters are optimised on the log scale (intercepts, covariate slopes and
harmonic coefficients are already log-linear; ``psi`` enters as ``log psi``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize, stats
from scipy.special import gammaln, digamma

from .core import (Adjacency, CountPanel, DataError, ForecastSet,
                   OffsetSpec, StcountError, row_normalize)

log = logging.getLogger(__name__)

FAMILIES = ("poisson", "negbin1", "negbinm")
COMPONENTS = ("endemic", "own", "neighbours")
_PREDICTOR = {"endemic": "nu", "own": "lambda", "neighbours": "phi"}


class EEConvergenceError(StcountError):
    """Optimiser stopped without meeting the convergence criteria."""

    def __init__(self, message, best_theta=None, best_loglik=None):
        super().__init__(message)
        self.best_theta = best_theta
        self.best_loglik = best_loglik


@dataclass(frozen=True)
class EESpec:
    adjacency: Adjacency
    offset: OffsetSpec
    family: str = "poisson"
    endemic_covariates: tuple = ()
    per_region: frozenset = frozenset()  # subset of {"nu", "lambda", "phi"}
    harmonics: dict = field(default_factory=dict)  # {"nu"|"lambda"|"phi": S}
    components: frozenset = frozenset(COMPONENTS)
    period: float = 365.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        comps = frozenset(self.components)
        if not comps or not comps <= set(COMPONENTS):
            raise ValueError(f"components must be a non-empty subset of {COMPONENTS}")
        per = frozenset(self.per_region)
        if not per <= {"nu", "lambda", "phi"}:
            raise ValueError("per_region entries must be nu, lambda or phi")
        harm = {k: int(v) for k, v in dict(self.harmonics).items() if int(v) > 0}
        if not set(harm) <= {"nu", "lambda", "phi"}:
            raise ValueError("harmonics keys must be nu, lambda or phi")
        if self.endemic_covariates and "endemic" not in comps:
            raise ValueError("endemic covariates need the endemic component")
        if self.offset.fractions.shape != (self.adjacency.K,):
            raise DataError("offset length does not match the adjacency")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "per_region", per)
        object.__setattr__(self, "harmonics", harm)
        object.__setattr__(self, "endemic_covariates", tuple(self.endemic_covariates))

    @property
    def K(self) -> int:
        return self.adjacency.K

    def active(self, component: str) -> bool:
        return component in self.components


@dataclass(frozen=True)
class EEParams:
    """Log-scale intercepts/slopes plus the natural-scale dispersion ``psi``.

    Intercept arrays have length 1 (shared) or K (per region). Inactive
    components carry ``None``.
    """

    alpha_nu: np.ndarray | None = None
    beta_nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_lambda: np.ndarray | None = None
    alpha_phi: np.ndarray | None = None
    psi: np.ndarray | None = None
    gamma_nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma_lambda: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma_phi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("alpha_nu", "alpha_lambda", "alpha_phi", "psi"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.atleast_1d(np.asarray(v, dtype=float)))
        for name in ("beta_nu", "gamma_nu", "gamma_lambda", "gamma_phi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.psi is not None and np.any(self.psi <= 0):
            raise ValueError("psi must be positive")

    @classmethod
    def from_natural(cls, nu=None, lam=None, phi=None, beta=(), psi=None, **harmonics):
        """Build from natural-scale ``nu``, ``lambda``, ``phi`` (scalars or length-K)."""
        lg = lambda v: None if v is None else np.log(np.atleast_1d(np.asarray(v, dtype=float)))
        return cls(alpha_nu=lg(nu), beta_nu=np.asarray(beta, dtype=float), alpha_lambda=lg(lam),
                   alpha_phi=lg(phi), psi=psi, **harmonics)


class EEMean(NamedTuple):
    mean: np.ndarray
    endemic: np.ndarray
    own: np.ndarray
    neighbours: np.ndarray


# -- parameter layout ----------------------------------------------------------

def _layout(spec: EESpec):
    """Ordered (field, size) blocks of the unconstrained parameter vector."""
    K = spec.K
    size = lambda p: K if p in spec.per_region else 1
    blocks = []
    if spec.active("endemic"):
        blocks += [("alpha_nu", size("nu")), ("beta_nu", len(spec.endemic_covariates)),
                   ("gamma_nu", 2 * spec.harmonics.get("nu", 0))]
    if spec.active("own"):
        blocks += [("alpha_lambda", size("lambda")), ("gamma_lambda", 2 * spec.harmonics.get("lambda", 0))]
    if spec.active("neighbours"):
        blocks += [("alpha_phi", size("phi")), ("gamma_phi", 2 * spec.harmonics.get("phi", 0))]
    if spec.family == "negbin1":
        blocks.append(("log_psi", 1))
    elif spec.family == "negbinm":
        blocks.append(("log_psi", K))
    return [(n, s) for n, s in blocks if s > 0]


def param_names(spec: EESpec) -> list:
    regions = spec.adjacency.regions
    out = []
    for name, size in _layout(spec):
        if name.startswith("alpha") or name == "log_psi":
            out += [name] if size == 1 else [f"{name}[{r}]" for r in regions]
        elif name == "beta_nu":
            out += [f"beta_nu[{c.name}]" for c in spec.endemic_covariates]
        else:
            out += [f"{name}[{f}{s}]" for s in range(1, size // 2 + 1) for f in ("sin", "cos")]
    return out


def pack(params: EEParams, spec: EESpec) -> np.ndarray:
    parts = []
    for name, size in _layout(spec):
        v = np.log(params.psi) if name == "log_psi" else getattr(params, name)
        broadcastable = name.startswith("alpha") or name == "log_psi"
        if v is None or not (v.size == size or (broadcastable and v.size == 1)):
            raise ValueError(f"parameter {name} missing or of wrong size for this spec")
        parts.append(np.broadcast_to(v, (size,)).astype(float))
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack(theta, spec: EESpec) -> EEParams:
    theta = np.asarray(theta, dtype=float)
    kw = {}
    i = 0
    for name, size in _layout(spec):
        v = theta[i:i + size].copy()
        i += size
        if name == "log_psi":
            kw["psi"] = np.exp(v)
        else:
            kw[name] = v
    return EEParams(**kw)


# -- design --------------------------------------------------------------------

def _harmonic_features(S, t, period, K):
    feats = []
    for s in range(1, S + 1):
        arg = 2 * np.pi * s * np.asarray(t, dtype=float) / period
        feats += [np.broadcast_to(np.sin(arg), (K, len(t))), np.broadcast_to(np.cos(arg), (K, len(t)))]
    return feats


def _intercept_features(per_region, K, T):
    if per_region:
        f = np.zeros((K, K, T))
        f[np.arange(K), np.arange(K), :] = 1.0
        return list(f)
    return [np.ones((K, T))]


def _component_features(spec: EESpec, days) -> dict:
    """Feature stacks (p_c, K, T) of each active log-linear predictor on ``days``."""
    K, T = spec.K, len(days)
    days = np.asarray(days)
    out = {}
    for comp in COMPONENTS:
        if not spec.active(comp):
            continue
        p = _PREDICTOR[comp]
        feats = _intercept_features(p in spec.per_region, K, T)
        if comp == "endemic":
            for cov in spec.endemic_covariates:
                if cov.values.shape[0] != K:
                    raise DataError(f"covariate {cov.name!r} has {cov.values.shape[0]} rows, expected {K}")
                if days.max() >= cov.length:
                    raise DataError(f"covariate {cov.name!r} is not available on day {int(days.max())}")
                feats.append(cov.values[:, days])
        feats += _harmonic_features(spec.harmonics.get(p, 0), days, spec.period, K)
        out[comp] = np.stack(feats)
    return out


def fitting_window(spec: EESpec, panel: CountPanel) -> tuple:
    """First usable day (needs the previous day and defined covariates) and N."""
    t0 = max([1] + [c.first_valid for c in spec.endemic_covariates])
    if t0 >= panel.N:
        raise DataError("no days left in the fitting window after covariate lags")
    for c in spec.endemic_covariates:
        c.check_defined(t0, panel.N, regions=panel.regions, dates=panel.dates)
    return t0, panel.N


class _Design:
    def __init__(self, spec: EESpec, panel: CountPanel, t0=None, t1=None):
        spec.adjacency.check_regions(panel.regions)
        if t0 is None:
            t0, t1 = fitting_window(spec, panel)
        self.spec = spec
        self.t0, self.t1 = t0, t1
        self.days = np.arange(t0, t1)
        y = panel.values.astype(float)
        self.y = y[:, t0:t1]
        self.y_prev = y[:, t0 - 1:t1 - 1]
        self.wn = row_normalize(spec.adjacency)
        self.n_prev = self.wn @ self.y_prev
        self.e = spec.offset.fractions[:, None]
        self.features = _component_features(spec, self.days)
        self.lgy = gammaln(self.y + 1.0)
        self.layout = _layout(spec)


def _split_coefs(theta, features: dict, family: str):
    """Map theta to per-component coefficient vectors and the log-psi block."""
    coefs = {}
    i = 0
    for comp in COMPONENTS:
        if comp in features:
            p = features[comp].shape[0]
            coefs[comp] = theta[i:i + p]
            i += p
    log_psi = theta[i:] if family != "poisson" else None
    return coefs, log_psi


def _parts(theta, d: _Design):
    coefs, log_psi = _split_coefs(np.asarray(theta, dtype=float), d.features, d.spec.family)
    zero = np.zeros_like(d.y)
    end = own = ne = zero
    if "endemic" in coefs:
        end = d.e * np.exp(np.tensordot(coefs["endemic"], d.features["endemic"], axes=1))
    if "own" in coefs:
        own = np.exp(np.tensordot(coefs["own"], d.features["own"], axes=1)) * d.y_prev
    if "neighbours" in coefs:
        ne = np.exp(np.tensordot(coefs["neighbours"], d.features["neighbours"], axes=1)) * d.n_prev
    return end, own, ne, log_psi


def _psi_matrix(log_psi, d: _Design):
    psi = np.exp(log_psi)
    return np.full((d.y.shape[0], 1), psi[0]) if psi.size == 1 else psi[:, None]


def _cell_loglik(y, mu, family, psi=None, lgy=None):
    """Per-cell log pmf; ``psi`` broadcastable to ``mu`` for NegBin."""
    if lgy is None:
        lgy = gammaln(y + 1.0)
    if family == "poisson":
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogmu = np.where(y > 0, y * np.log(np.where(mu > 0, mu, 1.0)), 0.0)
            ylogmu = np.where((y > 0) & (mu <= 0), -np.inf, ylogmu)
        return ylogmu - mu - lgy
    r = 1.0 / psi
    with np.errstate(divide="ignore"):
        return (gammaln(y + r) - gammaln(r) - lgy + r * np.log(r / (r + mu))
                + np.where(y > 0, y * np.log(np.where(mu > 0, mu, 1.0) / (r + mu)), 0.0))


def _loglik_and_grad(theta, d: _Design, grad=True):
    end, own, ne, log_psi = _parts(theta, d)
    mu = end + own + ne
    fam = d.spec.family
    psi = _psi_matrix(log_psi, d) if fam != "poisson" else None
    ll = float(np.sum(_cell_loglik(d.y, mu, fam, psi, d.lgy)))
    if not grad:
        return ll, None
    with np.errstate(divide="ignore", invalid="ignore"):
        if fam == "poisson":
            s = np.where(mu > 0, d.y / mu, 0.0) - 1.0
        else:
            r = 1.0 / psi
            s = np.where(mu > 0, d.y / mu, 0.0) - (d.y + r) / (mu + r)
    g = []
    for comp, term in (("endemic", end), ("own", own), ("neighbours", ne)):
        if comp in d.features:
            g.append(np.tensordot(d.features[comp], s * term, axes=([1, 2], [0, 1])))
    if fam != "poisson":
        r = np.broadcast_to(1.0 / psi, mu.shape)
        dldr = digamma(d.y + r) - digamma(r) + np.log(r / (r + mu)) + 1.0 - (r + d.y) / (r + mu)
        per_cell = -r * dldr  # d/dlog(psi) = -r d/dr
        g.append(np.array([per_cell.sum()]) if log_psi.size == 1 else per_cell.sum(axis=1))
    return ll, np.concatenate(g) if g else np.zeros(0)


# -- public evaluation -----------------------------------------------------------

def ee_mean(params: EEParams, spec: EESpec, y_prev, t: int) -> EEMean:
    """Conditional mean for day ``t`` given the previous day's counts."""
    if t < 1:
        raise ValueError("t must be >= 1 (the previous day is needed)")
    y_prev = np.asarray(y_prev, dtype=float)
    K = spec.K
    for c in spec.endemic_covariates:
        c.check_defined(t, t + 1)
    theta = pack(params, spec)
    feats = _component_features(spec, [t])
    d = _Design.__new__(_Design)
    d.spec, d.features = spec, feats
    d.y = np.zeros((K, 1))
    d.y_prev = y_prev[:, None]
    d.n_prev = row_normalize(spec.adjacency) @ d.y_prev
    d.e = spec.offset.fractions[:, None]
    end, own, ne, _ = _parts(theta, d)
    return EEMean(end[:, 0] + own[:, 0] + ne[:, 0], end[:, 0], own[:, 0], ne[:, 0])


def ee_loglik(params: EEParams, spec: EESpec, panel: CountPanel) -> float:
    d = _Design(spec, panel)
    return _loglik_and_grad(pack(params, spec), d, grad=False)[0]


def ee_loglik_grad(params: EEParams, spec: EESpec, panel: CountPanel) -> np.ndarray:
    """Analytic gradient with respect to the packed unconstrained parameters."""
    d = _Design(spec, panel)
    return _loglik_and_grad(pack(params, spec), d)[1]


# -- fitting ---------------------------------------------------------------------

@dataclass(frozen=True)
class EEFit:
    spec: EESpec
    params: EEParams
    theta: np.ndarray
    names: list
    loglik: float
    fitted_means: np.ndarray  # K x T over the fitting window
    window: tuple  # (t0, t1) panel day indices
    parts: tuple  # (endemic, own, neighbours) each K x T
    se: np.ndarray
    cov: np.ndarray
    convergence: dict
    panel: CountPanel

    @property
    def n_obs(self) -> int:
        return int(self.fitted_means.size)

    @property
    def n_params(self) -> int:
        return int(self.theta.size)

    @property
    def fitted_dates(self) -> tuple:
        return self.panel.dates[self.window[0]:self.window[1]]


def _start_values(spec: EESpec, panel: CountPanel, t0: int) -> np.ndarray:
    y = panel.values[:, t0:].astype(float)
    ybar_k = y.mean(axis=1)
    e = spec.offset.fractions
    lam0 = 0.5 if spec.active("own") else 0.0
    phi0 = 0.1 if spec.active("neighbours") else 0.0
    share = max(1.0 - lam0 - phi0, 0.2)
    kw = {}
    if spec.active("endemic"):
        if "nu" in spec.per_region:
            kw["alpha_nu"] = np.log(np.maximum(share * ybar_k / e, 1e-3))
        else:
            kw["alpha_nu"] = np.log(max(share * ybar_k.sum(), 1e-3))
        kw["beta_nu"] = np.zeros(len(spec.endemic_covariates))
        kw["gamma_nu"] = np.zeros(2 * spec.harmonics.get("nu", 0))
    if spec.active("own"):
        kw["alpha_lambda"] = np.log([lam0])
        kw["gamma_lambda"] = np.zeros(2 * spec.harmonics.get("lambda", 0))
    if spec.active("neighbours"):
        kw["alpha_phi"] = np.log([phi0])
        kw["gamma_phi"] = np.zeros(2 * spec.harmonics.get("phi", 0))
    if spec.family != "poisson":
        kw["psi"] = np.array([0.1])
    return pack(EEParams(**kw), spec)


def _fd_hessian(fun_grad, theta, rel_step=1e-5):
    """Central-difference Jacobian of an analytic gradient, symmetrised."""
    p = theta.size
    H = np.zeros((p, p))
    for i in range(p):
        h = rel_step * max(1.0, abs(theta[i]))
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        H[:, i] = (fun_grad(tp) - fun_grad(tm)) / (2 * h)
    return 0.5 * (H + H.T)


def ee_fit(spec: EESpec, panel: CountPanel, *, max_iter: int = 500, start=None,
           gtol: float = 1e-6, rtol: float = 1e-10) -> EEFit:
    """Maximum-likelihood fit by L-BFGS on the log scale, polished with Newton steps.

    Converged when the gradient infinity-norm drops below ``gtol`` or the
    relative log-likelihood change of the last accepted step is below ``rtol``.
    Raises :class:`EEConvergenceError` (carrying the best iterate) otherwise.
    """
    if panel.N < 10:
        raise DataError("fitting needs at least 10 days")
    d = _Design(spec, panel)
    theta0 = _start_values(spec, panel, d.t0) if start is None else (
        pack(start, spec) if isinstance(start, EEParams) else np.asarray(start, dtype=float))

    def nll(th):
        ll, g = _loglik_and_grad(th, d)
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(th)
        return -ll, -g

    res = optimize.minimize(nll, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "gtol": gtol, "ftol": rtol, "maxcor": 20})
    theta = res.x
    ll, g = _loglik_and_grad(theta, d)
    iterations = int(res.nit)
    last_rel = np.inf
    grad_fn = lambda th: -_loglik_and_grad(th, d)[1]

    # Newton polish: L-BFGS often stops a little short of gtol on large panels.
    for _ in range(50):
        if np.max(np.abs(g), initial=0.0) < gtol:
            break
        H = _fd_hessian(grad_fn, theta)
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            break
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        accepted = False
        for _ in range(30):
            cand = theta + step
            ll_c, g_c = _loglik_and_grad(cand, d)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                last_rel = abs(ll_c - ll) / max(abs(ll), 1.0)
                theta, ll, g = cand, ll_c, g_c
                accepted = True
                break
            step = step / 2
        iterations += 1
        if not accepted or last_rel < rtol:
            break

    grad_inf = float(np.max(np.abs(g), initial=0.0))
    if not res.success and res.status == 1 and grad_inf >= gtol:
        raise EEConvergenceError(
            f"no convergence after {max_iter} iterations (gradient norm {grad_inf:.3g})",
            best_theta=theta, best_loglik=ll)
    converged = grad_inf < gtol or last_rel < rtol or (res.success and grad_inf < 1e3 * gtol)
    if not converged:
        raise EEConvergenceError(
            f"optimiser stopped without convergence: {res.message} (gradient norm {grad_inf:.3g})",
            best_theta=theta, best_loglik=ll)

    H = _fd_hessian(grad_fn, theta)
    try:
        np.linalg.cholesky(H)
        cov = np.linalg.inv(H)
        se = np.sqrt(np.diag(cov))
        hess_pd = True
    except np.linalg.LinAlgError:
        cov = np.full_like(H, np.nan)
        se = np.full(theta.size, np.nan)
        hess_pd = False
    params = unpack(theta, spec)
    boundary = bool(np.any(theta[_positive_scale_mask(spec)] < -15.0)) or not hess_pd
    end, own, ne, _ = _parts(theta, d)
    conv = {"converged": True, "boundary": boundary, "iterations": iterations,
            "grad_inf_norm": grad_inf, "hessian_pd": hess_pd, "message": str(res.message)}
    if boundary:
        log.info("EE fit converged on the parameter boundary")
    return EEFit(spec, params, theta, param_names(spec), ll, end + own + ne, (d.t0, d.t1),
                 (end, own, ne), se, cov, conv, panel)


def _positive_scale_mask(spec: EESpec) -> np.ndarray:
    """Mask of log-scale intercepts whose divergence to -inf signals a boundary."""
    mask = []
    for name, size in _layout(spec):
        mask += [name.startswith("alpha")] * size
    return np.array(mask, dtype=bool)


# -- summaries -----------------------------------------------------------------

def ee_decompose(fit: EEFit) -> tuple:
    """Average share (%) of the fitted mean from endemic, own-lag and neighbour parts."""
    end, own, ne = fit.parts
    mu = end + own + ne
    ok = mu > 0
    shares = [100.0 * np.mean(p[ok] / mu[ok]) for p in (end, own, ne)]
    total = sum(shares)
    return tuple(100.0 * s / total for s in shares)


class InformationCriteria(NamedTuple):
    loglik: float
    aic: float
    bic: float
    n_params: int
    n_obs: int


def information_criteria(loglik: float, n_params: int, n_obs: int) -> InformationCriteria:
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * np.log(n_obs) if n_obs > 0 else -2.0 * loglik
    return InformationCriteria(float(loglik), float(aic), float(bic), int(n_params), int(n_obs))


def ee_information_criteria(fit: EEFit) -> InformationCriteria:
    return information_criteria(fit.loglik, fit.n_params, fit.n_obs)


# -- forecasting -----------------------------------------------------------------

def predictive_quantiles(mu, family: str, psi=None, q=(0.025, 0.5, 0.975)):
    mu = np.asarray(mu, dtype=float)
    if family == "poisson":
        return [stats.poisson.ppf(qq, mu) for qq in q]
    r = 1.0 / np.asarray(psi, dtype=float)
    return [stats.nbinom.ppf(qq, r, r / (r + mu)) for qq in q]


def _psi_per_region(fit: EEFit):
    if fit.spec.family == "poisson":
        return None
    psi = fit.params.psi
    return np.broadcast_to(psi, (fit.spec.K,)).astype(float)


def ee_one_step_ahead(fit: EEFit, panel: CountPanel, start: int, end: int) -> ForecastSet:
    """Successive one-step predictions for panel days ``start..end`` (inclusive).

    Each day uses the observed counts of the day before; intervals are the
    central 95% quantiles of the fitted family at the predictive mean.
    """
    spec = fit.spec
    spec.adjacency.check_regions(panel.regions)
    if start < 1 or start <= fit.window[0] - 1 or end < start or end >= panel.N:
        raise ValueError("need fit window start < start <= end < panel.N")
    for c in spec.endemic_covariates:
        c.check_defined(start, end + 1, regions=panel.regions, dates=panel.dates)
    d = _Design(spec, panel, start, end + 1)
    e, o, n, _ = _parts(fit.theta, d)
    mu = e + o + n
    psi = _psi_per_region(fit)
    lo, med, hi = predictive_quantiles(mu, spec.family, None if psi is None else psi[:, None])
    return ForecastSet(panel.regions, panel.dates[start:end + 1], mu, med, lo, hi)


def ee_forecast(fit: EEFit, panel: CountPanel, horizon: int, *, n_paths: int = 2000,
                rng=None) -> ForecastSet:
    """Multi-step forecast beyond the last day of ``panel``.

    The predictive mean follows the exact linear recursion in which unobserved
    counts are replaced by their predictive means. Medians and 95% intervals
    come from ``n_paths`` simulated sample paths.
    """
    spec = fit.spec
    spec.adjacency.check_regions(panel.regions)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    N = panel.N
    for c in spec.endemic_covariates:
        if N + horizon > c.length:
            raise DataError(
                f"horizon {horizon} goes beyond covariate {c.name!r} (known for {c.length - N} future days)")
        c.check_defined(N, N + horizon)
    rng = np.random.default_rng(rng)
    days = np.arange(N, N + horizon)
    feats = _component_features(spec, days)
    coefs, _ = _split_coefs(fit.theta, feats, spec.family)
    rate = {c: np.exp(np.tensordot(coefs[c], feats[c], axes=1)) for c in feats}
    e = spec.offset.fractions[:, None]
    wn = row_normalize(spec.adjacency)
    K = spec.K
    psi = _psi_per_region(fit)

    def step(h, y_prev):
        # y_prev is K x P (P paths); returns the K x P conditional means
        mu = np.zeros_like(y_prev)
        if "endemic" in rate:
            mu = mu + e * rate["endemic"][:, h, None]
        if "own" in rate:
            mu = mu + rate["own"][:, h, None] * y_prev
        if "neighbours" in rate:
            mu = mu + rate["neighbours"][:, h, None] * (wn @ y_prev)
        return mu

    mean = np.zeros((K, horizon))
    m = panel.values[:, -1:].astype(float)
    for h in range(horizon):
        m = step(h, m)
        mean[:, h] = m[:, 0]

    paths = np.zeros((K, horizon, n_paths))
    y = np.repeat(panel.values[:, -1:].astype(float), n_paths, axis=1)
    for h in range(horizon):
        mu = step(h, y)
        if spec.family == "poisson":
            y = rng.poisson(mu).astype(float)
        else:
            r = (1.0 / psi)[:, None]
            y = rng.poisson(rng.gamma(r, mu / r)).astype(float)
        paths[:, h, :] = y
    lo, med, hi = np.quantile(paths, [0.025, 0.5, 0.975], axis=2, method="inverted_cdf")
    return ForecastSet(panel.regions, panel.future_dates(horizon), mean, med, lo, hi)


def fit_report(fit: EEFit) -> dict:
    ic = ee_information_criteria(fit)
    endemic, own, ne = ee_decompose(fit)
    params = {}
    for name, v, s in zip(fit.names, fit.theta, fit.se):
        params[name] = {"estimate": float(v), "std_error": float(s), "natural_scale": float(np.exp(v))}
    return {
        "model": "endemic-epidemic",
        "family": fit.spec.family,
        "parameters": params,
        "loglik": ic.loglik, "aic": ic.aic, "bic": ic.bic,
        "n_params": ic.n_params, "n_obs": ic.n_obs,
        "decomposition_percent": {"endemic": endemic, "epi.own": own, "epi.neighbours": ne},
        "convergence": fit.convergence,
        "window": {"start": fit.panel.dates[fit.window[0]].isoformat(),
                   "end": fit.panel.dates[fit.window[1] - 1].isoformat()},
    }
