"""Multivariate covariance generalised linear models for a stacked count response.

Mean: ``mu = exp(offset + X beta)``.
Covariance: ``C = V^1/2 Omega(tau) V^1/2`` with ``V = diag(mu^p)`` (power
variance) and a matrix linear predictor ``h(Omega) = tau_0 I + sum_d tau_d Z_d``
under an identity or exponential covariance link.

Fitting alternates a Fisher-scoring step on the quasi-score
``D^T C^-1 (y - mu)`` with a chaser step on the Pearson estimating
functions ``r^T W_d r - tr(W_d C)``, ``W_d = -dC^-1/dtau_d``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg, sparse

from .core import (Adjacency, CountPanel, DataError, ForecastSet,
                   OffsetSpec, StcountError, row_normalize)

log = logging.getLogger(__name__)

COV_LINKS = ("identity", "exponential")


class McglmError(StcountError):
    pass


# -- algebra ---------------------------------------------------------------------

def generalized_kronecker(sigma_blocks, sigma_b) -> np.ndarray:
    """``Bdiag(L_1..L_N) (Sigma_b kron I_K) Bdiag(L_1^T..L_N^T)`` with ``L_t`` lower Cholesky factors."""
    blocks = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sigma_blocks]
    sb = np.atleast_2d(np.asarray(sigma_b, dtype=float))
    N = len(blocks)
    if sb.shape != (N, N):
        raise ValueError(f"sigma_b must be {N} x {N}")
    if not np.allclose(sb, sb.T) or not np.allclose(np.diag(sb), 1.0):
        raise ValueError("sigma_b must be a symmetric matrix with unit diagonal")
    K = blocks[0].shape[0]
    if any(b.shape != (K, K) for b in blocks):
        raise ValueError("all within-outcome blocks must be K x K")
    chols = []
    for t, b in enumerate(blocks):
        try:
            chols.append(np.linalg.cholesky(b))
        except np.linalg.LinAlgError:
            raise ValueError(f"block {t} is not positive definite") from None
    L = linalg.block_diag(*chols)
    return L @ np.kron(sb, np.eye(K)) @ L.T


def build_structure_matrices(adjacency: Adjacency | np.ndarray, K: int, Nt: int):
    """Temporal first-neighbour ``Z1 = I_K kron Gamma`` and spatial ``Z2 = W kron I_Nt``.

    Observations are stacked region-major: index ``k * Nt + i``.
    """
    if Nt < 1:
        raise ValueError("Nt must be >= 1")
    w = np.asarray(adjacency.w if isinstance(adjacency, Adjacency) else adjacency, dtype=float)
    if w.shape != (K, K):
        raise ValueError("adjacency does not match K")
    gamma = np.eye(Nt, k=1) + np.eye(Nt, k=-1)
    return np.kron(np.eye(K), gamma), np.kron(w, np.eye(Nt))


class _Omega(NamedTuple):
    omega: np.ndarray
    derivs: list  # dOmega/dtau_d, d = 0..D


def _omega(tau, Z, link: str) -> _Omega:
    n = Z[0].shape[0] if Z else None
    U = tau[0] * np.eye(n) + sum(t * z for t, z in zip(tau[1:], Z[1:]))
    if link == "identity":
        return _Omega(U, list(Z))
    lam, Q = np.linalg.eigh(U)
    el = np.exp(lam)
    omega = (Q * el) @ Q.T
    diff = lam[:, None] - lam[None, :]
    same = np.abs(diff) < 1e-10
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(same, el[:, None], (el[:, None] - el[None, :]) / np.where(same, 1.0, diff))
    derivs = [omega]  # d/dtau_0 of exp(tau_0 I + ...) is the matrix itself
    for z in Z[1:]:
        derivs.append(Q @ (G * (Q.T @ z @ Q)) @ Q.T)
    return _Omega(omega, derivs)


# -- model -----------------------------------------------------------------------

@dataclass(frozen=True)
class McglmSpec:
    design: np.ndarray  # n x q
    offset: np.ndarray  # n, log scale
    Z: tuple = ()  # Z_1..Z_D, each n x n symmetric
    power: float = 2.0
    cov_link: str = "exponential"
    column_names: tuple = ()
    max_n: int = 5000

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.design, dtype=float))
        n = X.shape[0]
        off = np.broadcast_to(np.asarray(self.offset, dtype=float), (n,)).copy()
        if self.cov_link not in COV_LINKS:
            raise ValueError(f"cov_link must be one of {COV_LINKS}")
        if self.power < 0:
            raise ValueError("variance power must be >= 0")
        if n > self.max_n:
            raise McglmError(f"n = {n} exceeds the dense-covariance cap max_n = {self.max_n}")
        Z = tuple(np.asarray(z, dtype=float) for z in self.Z)
        for z in Z:
            if z.shape != (n, n) or not np.allclose(z, z.T):
                raise ValueError("structure matrices must be symmetric n x n")
        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def q(self) -> int:
        return self.design.shape[1]

    @property
    def n_tau(self) -> int:
        return len(self.Z) + 1

    def structure(self) -> list:
        return [np.eye(self.n)] + list(self.Z)


@dataclass(frozen=True)
class McglmParams:
    beta: np.ndarray
    tau: np.ndarray


def covariance_matrix(params: McglmParams, spec: McglmSpec, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("mu must be positive")
    om = _omega(np.asarray(params.tau, dtype=float), spec.structure(), spec.cov_link)
    if spec.cov_link == "identity":
        _require_pd(om.omega)
    v = mu ** (spec.power / 2.0)
    return v[:, None] * om.omega * v[None, :]


def _require_pd(m):
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise McglmError("Omega(tau) is not positive definite") from None


def gaussian_loglik(y, mu, C) -> float:
    """Gaussian log-density of ``y`` at mean ``mu`` and covariance ``C``."""
    r = np.asarray(y, dtype=float) - mu
    try:
        cf = linalg.cho_factor(C, lower=True)
    except linalg.LinAlgError:
        raise McglmError("singular covariance matrix") from None
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = r @ linalg.cho_solve(cf, r)
    return float(-0.5 * len(r) * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * quad)


class PseudoCriteria(NamedTuple):
    plogLik: float
    pAIC: float
    pBIC: float
    df: int


def pseudo_information(plogLik: float, df: int, n: int) -> PseudoCriteria:
    return PseudoCriteria(float(plogLik), float(-2 * plogLik + 2 * df),
                          float(-2 * plogLik + df * np.log(n)) if n > 0 else float(-2 * plogLik), int(df))


@dataclass(frozen=True)
class McglmFit:
    spec: McglmSpec
    params: McglmParams
    mu: np.ndarray
    y: np.ndarray
    plogLik: float
    pAIC: float
    pBIC: float
    df: int
    convergence: dict
    beta_se: np.ndarray
    tau_se: np.ndarray
    layout: "McglmLayout | None" = None


class _Eig(NamedTuple):
    """Eigenbasis of ``U = tau_0 I + sum tau_d Z_d``.

    ``w`` holds the eigenvalues of Omega (``lam`` or ``exp(lam)``) and ``G``
    the divided differences that map ``Q' Z Q`` to ``Q' dOmega Q``.
    """

    Q: np.ndarray
    w: np.ndarray
    G: np.ndarray | None


def _eig(tau, spec: McglmSpec) -> _Eig | None:
    n = spec.n
    U = tau[0] * np.eye(n)
    for t, z in zip(tau[1:], spec.Z):
        U += t * z
    lam, Q = np.linalg.eigh(U)
    if spec.cov_link == "identity":
        if lam.min() <= 0:
            return None
        return _Eig(Q, lam, None)
    w = np.exp(lam)
    diff = lam[:, None] - lam[None, :]
    same = np.abs(diff) < 1e-10
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        G = np.where(same, w[:, None], np.expm1(diff) * w[None, :] / np.where(same, 1.0, diff))
    return _Eig(Q, w, G)


class _Work:
    """Solver-side evaluations that reuse one eigendecomposition per tau.

    With ``C = V^1/2 Omega V^1/2`` every ``C^-1`` product reduces to
    ``Omega^-1`` applied to residuals scaled by ``V^-1/2``.
    """

    def __init__(self, spec: McglmSpec, y):
        self.spec, self.y = spec, y
        self._cache = {}
        self._sparse = [sparse.csr_matrix(z) for z in spec.Z]

    def eig(self, tau) -> _Eig | None:
        key = np.asarray(tau, dtype=float).tobytes()
        if key not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            self._cache[key] = _eig(np.asarray(tau, dtype=float), self.spec)
        return self._cache[key]

    def _scaled(self, beta, e: _Eig):
        spec = self.spec
        mu = np.exp(spec.offset + spec.design @ beta)
        v = mu ** (spec.power / 2.0)
        s = e.Q.T @ ((self.y - mu) / v)
        return mu, v, s

    def plog(self, beta, tau) -> float:
        e = self.eig(tau)
        if e is None:
            return -np.inf
        mu, _, s = self._scaled(beta, e)
        if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
            return -np.inf
        logdet = self.spec.power * np.sum(np.log(mu)) + np.sum(np.log(e.w))
        return float(-0.5 * self.spec.n * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * np.sum(s * s / e.w))

    def beta_terms(self, beta, tau):
        e = self.eig(tau)
        mu, v, s = self._scaled(beta, e)
        Dq = e.Q.T @ ((mu / v)[:, None] * self.spec.design)
        return Dq.T @ (s / e.w), Dq.T @ (Dq / e.w[:, None])

    def tau_terms(self, beta, tau):
        e = self.eig(tau)
        _, _, s = self._scaled(beta, e)
        u = s / e.w
        M = [np.diag(e.w) if e.G is not None else np.eye(self.spec.n)]
        for z in self._sparse:
            zt = e.Q.T @ (z @ e.Q)
            M.append(zt if e.G is None else e.G * zt)
        rw = 1.0 / np.sqrt(e.w)
        Mw = [rw[:, None] * m * rw[None, :] for m in M]
        pearson = np.array([u @ m @ u - np.sum(np.diag(m) / e.w) for m in M])
        S_tau = -np.array([[np.sum(a * b) for b in Mw] for a in Mw])
        return pearson, S_tau


def estimating_functions(beta, tau, spec: McglmSpec, y):
    """Quasi-score, Pearson functions and their sensitivities at ``(beta, tau)``."""
    wk = _Work(spec, np.asarray(y, dtype=float))
    if wk.eig(tau) is None:
        raise McglmError("Omega(tau) is not positive definite")
    score, S_beta = wk.beta_terms(np.asarray(beta, float), tau)
    pearson, S_tau = wk.tau_terms(np.asarray(beta, float), tau)
    return score, S_beta, pearson, S_tau


def _glm_start(spec: McglmSpec, y, iters=25):
    """Poisson IRLS with the log link for starting values."""
    X, off = spec.design, spec.offset
    beta = np.linalg.lstsq(X, np.log(np.maximum(y, 0) + 0.5) - off, rcond=None)[0]
    for _ in range(iters):
        eta = off + X @ beta
        mu = np.exp(np.clip(eta, -30, 30))
        z = eta - off + (y - mu) / mu
        sw = np.sqrt(mu)
        new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        if not np.all(np.isfinite(new)):
            break
        done = np.max(np.abs(new - beta)) < 1e-10
        beta = new
        if done:
            break
    return beta


def mcglm_fit(spec: McglmSpec, response, *, max_iter: int = 200, tol: float = 1e-6,
              start: McglmParams | None = None, max_halvings: int = 20,
              anderson: int = 5) -> McglmFit:
    """Fit by alternating quasi-score (beta) and Pearson chaser (tau) updates.

    One update is a Fisher scoring step in beta followed by a chaser step
    in tau at the new beta. This map contracts slowly when beta and tau are
    coupled, so its iterates are extrapolated by Anderson mixing over the
    last ``anderson`` updates (0 disables it).

    Whenever an extrapolated point is unusable (non-finite update or
    plogLik, or Omega not positive definite) the history is dropped and a
    damped update is taken instead: each half step is halved while it would
    lower plogLik by more than ``1 + 1e-4 |plogLik|`` (at most
    ``max_halvings`` times). Small drops are accepted because the
    estimating-equation root is not the plogLik maximiser. Under the
    identity link tau steps are also halved until Omega is positive definite.

    Converged when both full update norms fall below ``tol`` and the
    quasi-score and Pearson residuals (sup norm) do too; at a tau boundary
    only the beta conditions apply.
    """
    y = np.asarray(response, dtype=float)
    if y.shape != (spec.n,):
        raise ValueError("response length does not match the design")
    if np.linalg.matrix_rank(spec.design) < spec.q:
        raise McglmError("design matrix is not of full column rank")
    if start is None:
        beta = _glm_start(spec, y)
        mu = np.exp(spec.offset + spec.design @ beta)
        disp = max(float(np.mean((y - mu) ** 2 / mu ** spec.power)), 1e-3)
        tau = np.zeros(spec.n_tau)
        tau[0] = disp if spec.cov_link == "identity" else np.log(disp)
    else:
        beta = np.asarray(start.beta, dtype=float).copy()
        tau = np.asarray(start.tau, dtype=float).copy()

    wk = _Work(spec, y)
    if wk.eig(tau) is None:
        raise McglmError("starting Omega(tau) is not positive definite")
    boundary = converged = False
    it = 0
    cur = wk.plog(beta, tau)
    db_norm = dt_norm = np.inf
    hist = _Anderson(anderson) if anderson else None
    best = None  # (beta, tau, cur, update norm) with the smallest update so far
    restarts = cooldown = 0
    for it in range(1, max_iter + 1):
        x = np.concatenate([beta, tau])
        use = hist is not None and not boundary and cooldown == 0
        cooldown = max(cooldown - 1, 0)
        f = _full_update(wk, beta, tau) if use else None
        fn = np.inf if f is None else float(np.max(np.abs(f)))
        if use and best is not None and fn > 10.0 * best[3]:
            # extrapolation went astray: back to the best point, then plain
            # damped updates for a while (longer after each restart)
            beta, tau, cur = best[:3]
            best, f = None, None
            restarts += 1
            cooldown = min(2 ** restarts, 32)
        elif f is not None and (best is None or fn < best[3]):
            best = (beta, tau, cur, fn)
        if f is not None:
            db_norm, dt_norm = float(np.max(np.abs(f[:spec.q]))), float(np.max(np.abs(f[spec.q:])))
            if max(db_norm, dt_norm) < tol and _residual_norm(wk, beta, tau) < tol:
                converged = True
                break
            cand = hist.propose(x, f)
            with np.errstate(all="ignore"):
                ok = cand is not None and wk.eig(cand[spec.q:]) is not None
                val = wk.plog(cand[:spec.q], cand[spec.q:]) if ok else -np.inf
            if np.isfinite(val):
                beta, tau, cur = cand[:spec.q], cand[spec.q:], val
                continue
        if hist is not None:
            hist.clear()
        beta, tau, cur, db_norm, dt_norm, hit = _sweep(wk, spec, beta, tau, cur, max_halvings)
        boundary = boundary or hit or _tau_at_boundary(tau, spec)
        if db_norm < tol and (dt_norm < tol or boundary) and (
                boundary or _residual_norm(wk, beta, tau) < tol):
            converged = True
            break
    if not converged:
        raise McglmError(f"no convergence after {max_iter} iterations "
                         f"(|dbeta| = {db_norm:.3g}, |dtau| = {dt_norm:.3g})")

    mu = np.exp(spec.offset + spec.design @ beta)
    df = spec.q + spec.n_tau
    crit = pseudo_information(wk.plog(beta, tau), df, spec.n)
    score, S_beta = wk.beta_terms(beta, tau)
    pearson, S_tau = wk.tau_terms(beta, tau)
    beta_se = np.sqrt(np.diag(np.linalg.inv(S_beta)))
    try:
        # sandwich variance of the Pearson root under the Gaussian working model
        tau_se = np.sqrt(np.diag(np.linalg.inv(-S_tau) * 2.0))
    except np.linalg.LinAlgError:
        tau_se = np.full(tau.size, np.nan)
    conv = {"converged": True, "boundary": bool(boundary), "iterations": it,
            "quasi_score_inf_norm": float(np.max(np.abs(score))),
            "pearson_inf_norm": float(np.max(np.abs(pearson)))}
    return McglmFit(spec, McglmParams(beta, tau), mu, y, crit.plogLik, crit.pAIC, crit.pBIC, df,
                    conv, beta_se, tau_se)


def _sweep(wk: _Work, spec: McglmSpec, beta, tau, cur, max_halvings):
    """One plain update: damped quasi-score step in beta, then Pearson chaser in tau."""
    try:
        score, S_beta = wk.beta_terms(beta, tau)
        db = np.linalg.solve(S_beta, score)
    except np.linalg.LinAlgError:
        raise McglmError("singular quasi-score sensitivity matrix") from None
    beta, cur = _damped(lambda b: wk.plog(b, tau), beta, db, cur, max_halvings)

    try:
        pearson, S_tau = wk.tau_terms(beta, tau)
        dtau = -np.linalg.solve(S_tau, pearson)
    except np.linalg.LinAlgError:
        raise McglmError("singular Pearson sensitivity matrix") from None
    step = dtau.copy()
    hit = False
    for _ in range(max_halvings):
        if wk.eig(tau + step) is not None:
            break
        step /= 2
    else:
        hit = True
        step = np.zeros_like(step)
    tau, cur = _damped(lambda t: wk.plog(beta, t), tau, step, cur, max_halvings)
    return beta, tau, cur, float(np.max(np.abs(db))), float(np.max(np.abs(dtau))), hit


def _full_update(wk: _Work, beta, tau):
    """Undamped update ``(dbeta, dtau)``, or None when it is not finite."""
    with np.errstate(all="ignore"):
        try:
            score, S_beta = wk.beta_terms(beta, tau)
            db = np.linalg.solve(S_beta, score)
            pearson, S_tau = wk.tau_terms(beta + db, tau)
            dtau = -np.linalg.solve(S_tau, pearson)
        except np.linalg.LinAlgError:
            return None
    f = np.concatenate([db, dtau])
    return f if np.all(np.isfinite(f)) else None


def _residual_norm(wk: _Work, beta, tau) -> float:
    score, _ = wk.beta_terms(beta, tau)
    pearson, _ = wk.tau_terms(beta, tau)
    return float(max(np.max(np.abs(score)), np.max(np.abs(pearson))))


class _Anderson:
    """Type-II Anderson mixing of ``x -> x + f(x)`` over the last ``m`` updates."""

    def __init__(self, m: int):
        self.m = m
        self.X, self.F = [], []

    def clear(self):
        self.X, self.F = [], []

    def propose(self, x, f):
        self.X.append(x)
        self.F.append(f)
        if len(self.F) > self.m + 1:
            self.X.pop(0)
            self.F.pop(0)
        g = x + f
        if len(self.F) < 2:
            return g
        dF = np.diff(np.array(self.F), axis=0).T
        dX = np.diff(np.array(self.X), axis=0).T
        try:
            gamma = np.linalg.lstsq(dF, f, rcond=None)[0]
        except np.linalg.LinAlgError:
            return g
        out = g - (dX + dF) @ gamma
        return out if np.all(np.isfinite(out)) else g


def _damped(f, x, step, cur, max_halvings):
    s = step
    for _ in range(max_halvings + 1):
        cand = x + s
        val = f(cand)
        if val >= cur - (1.0 + 1e-4 * abs(cur)):
            return cand, val
        s = s / 2
    cand = x + step
    return cand, f(cand)


def _tau_at_boundary(tau, spec) -> bool:
    if spec.cov_link == "identity":
        return tau[0] < 1e-8
    return tau[0] < -25.0


def pseudo_criteria(fit: McglmFit) -> PseudoCriteria:
    """Recompute plogLik, pAIC, pBIC and df from the fitted mean and covariance."""
    C = covariance_matrix(fit.params, fit.spec, fit.mu)
    return pseudo_information(gaussian_loglik(fit.y, fit.mu, C), fit.df, fit.spec.n)


def mcglm_predict(fit: McglmFit, design_new, offset_new) -> np.ndarray:
    X = np.atleast_2d(np.asarray(design_new, dtype=float))
    if X.shape[1] != fit.spec.q:
        raise ValueError(f"design has {X.shape[1]} columns, the fit has {fit.spec.q}")
    off = np.broadcast_to(np.asarray(offset_new, dtype=float), (X.shape[0],))
    if np.any(~np.isfinite(X)):
        raise DataError("missing covariate in prediction design")
    return np.exp(off + X @ fit.params.beta)


# -- panel application -----------------------------------------------------------

@dataclass(frozen=True)
class McglmLayout:
    """How a stacked design was built from a panel, so it can be extended forward."""

    regions: tuple
    t0: int
    t1: int
    covariates: tuple
    region_intercepts: bool
    lagged_own: bool
    lagged_neighbours: bool
    lag_transform: str
    wn: np.ndarray
    log_offset: np.ndarray  # per region
    column_names: tuple

    @property
    def Nt(self) -> int:
        return self.t1 - self.t0

    def rows(self, days, y_prev):
        """Design rows (K*len(days) x q, region-major) given lagged counts ``y_prev`` (K x len(days))."""
        days = np.asarray(days)
        K = len(self.regions)
        T = len(days)
        y_prev = np.asarray(y_prev, dtype=float).reshape(K, T)
        cols = []
        if self.region_intercepts:
            for k in range(K):
                c = np.zeros((K, T))
                c[k] = 1.0
                cols.append(c)
        else:
            cols.append(np.ones((K, T)))
        for cov in self.covariates:
            if days.max() >= cov.length:
                raise DataError(f"covariate {cov.name!r} is not available on day {int(days.max())}")
            cols.append(cov.values[:, days])
        tr = np.log1p if self.lag_transform == "log1p" else (lambda v: v)
        if self.lagged_own:
            cols.append(tr(y_prev))
        if self.lagged_neighbours:
            cols.append(tr(self.wn @ y_prev))
        X = np.stack([c.reshape(-1) for c in cols], axis=1)
        off = np.repeat(self.log_offset, T)
        return X, off


def build_panel_problem(panel: CountPanel, adjacency: Adjacency, offset: OffsetSpec,
                        covariates=(), *, region_intercepts: bool = True, lagged_own: bool = True,
                        lagged_neighbours: bool = False, lag_transform: str = "identity",
                        components=("temporal", "spatial"), power: float = 2.0,
                        cov_link: str = "exponential", max_n: int = 5000):
    """Stack a K x N panel into a single-response McGLM problem.

    Returns ``(spec, y, layout)``. The fitting window starts on the first day
    where all covariates (and, if used, lagged responses) are defined.
    """
    adjacency.check_regions(panel.regions)
    if lag_transform not in ("identity", "log1p"):
        raise ValueError("lag_transform must be identity or log1p")
    covariates = tuple(covariates)
    t0 = max([1 if (lagged_own or lagged_neighbours) else 0] + [c.first_valid for c in covariates])
    t1 = panel.N
    if t1 - t0 < 2:
        raise DataError("fitting window too short for the McGLM")
    for c in covariates:
        c.check_defined(t0, t1, regions=panel.regions, dates=panel.dates)
    names = ([f"region[{r}]" for r in panel.regions] if region_intercepts else ["intercept"])
    names += [c.name for c in covariates]
    names += ["y_lag1"] * lagged_own + ["neighbours_lag1"] * lagged_neighbours
    layout = McglmLayout(panel.regions, t0, t1, covariates, region_intercepts, lagged_own,
                         lagged_neighbours, lag_transform, row_normalize(adjacency),
                         offset.log_fractions, tuple(names))
    days = np.arange(t0, t1)
    y_prev = panel.values[:, t0 - 1:t1 - 1] if t0 >= 1 else np.zeros((panel.K, t1 - t0))
    X, off = layout.rows(days, y_prev)
    y = panel.values[:, t0:t1].astype(float).reshape(-1)
    K, Nt = panel.K, t1 - t0
    Z1, Z2 = build_structure_matrices(adjacency, K, Nt)
    Z = []
    for comp in components:
        if comp == "temporal":
            Z.append(Z1)
        elif comp == "spatial":
            Z.append(Z2)
        else:
            raise ValueError(f"unknown covariance component {comp!r}")
    spec = McglmSpec(X, off, tuple(Z), power=power, cov_link=cov_link, column_names=tuple(names),
                     max_n=max_n)
    return spec, y, layout


def fit_panel(panel, adjacency, offset, covariates=(), **kw) -> McglmFit:
    fit_kw = {k: kw.pop(k) for k in ("max_iter", "tol", "anderson") if k in kw}
    spec, y, layout = build_panel_problem(panel, adjacency, offset, covariates, **kw)
    fit = mcglm_fit(spec, y, **fit_kw)
    return McglmFit(**{**fit.__dict__, "layout": layout})


def fitted_matrix(fit: McglmFit) -> np.ndarray:
    K = len(fit.layout.regions)
    return fit.mu.reshape(K, -1)


def _interval(fit: McglmFit, mean):
    # marginal Gaussian approximation with the average diagonal dispersion
    om = _omega(fit.params.tau, fit.spec.structure(), fit.spec.cov_link).omega
    sd = np.sqrt(np.mean(np.diag(om)) * mean ** fit.spec.power)
    return np.maximum(mean - 1.96 * sd, 0.0), mean + 1.96 * sd


def mcglm_forecast(fit: McglmFit, panel: CountPanel, horizon: int) -> ForecastSet:
    """Recursive inverse-link forecast beyond the last day of ``panel``.

    Lagged responses on unobserved days are replaced by earlier predictions.
    """
    lay = fit.layout
    if lay is None:
        raise ValueError("forecasting needs a fit built by fit_panel")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    N = panel.N
    for c in lay.covariates:
        if N + horizon > c.length:
            raise DataError(
                f"horizon {horizon} goes beyond covariate {c.name!r} (known for {c.length - N} future days)")
        c.check_defined(N, N + horizon)
    K = panel.K
    prev = panel.values[:, -1].astype(float)
    mean = np.zeros((K, horizon))
    for h in range(horizon):
        X, off = lay.rows([N + h], prev[:, None])
        prev = mcglm_predict(fit, X, off)
        mean[:, h] = prev
    lo, hi = _interval(fit, mean)
    return ForecastSet(panel.regions, panel.future_dates(horizon), mean, mean, lo, hi)


def fit_report(fit: McglmFit) -> dict:
    names = fit.spec.column_names
    return {
        "model": "mcglm",
        "power": fit.spec.power,
        "cov_link": fit.spec.cov_link,
        "beta": {n: {"estimate": float(b), "std_error": float(s)}
                 for n, b, s in zip(names, fit.params.beta, fit.beta_se)},
        "tau": [{"estimate": float(t), "std_error": float(s)}
                for t, s in zip(fit.params.tau, fit.tau_se)],
        "plogLik": fit.plogLik, "pAIC": fit.pAIC, "pBIC": fit.pBIC, "df": fit.df, "n": fit.spec.n,
        "convergence": fit.convergence,
    }
