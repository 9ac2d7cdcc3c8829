"""Independent reference computations used to cross-check the library.

Each oracle takes a different route from the code it checks: plain loops,
dense matrices or textbook formulas instead of the vectorised or
eigenbasis implementations.
"""
import math

import numpy as np
from scipy import stats


def poisson_glm_irls(X, y, offset=None, iters=100, tol=1e-12):
    """Log-link Poisson regression by textbook IRLS with normal equations."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    off = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(max(y.mean(), 1e-8)) - off.mean()
    for _ in range(iters):
        eta = off + X @ beta
        mu = np.exp(eta)
        z = eta - off + (y - mu) / mu
        XtW = X.T * mu
        new = np.linalg.solve(XtW @ X, XtW @ z)
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def log_pmf(y, mu, family, psi=None):
    """Single-cell log pmf via the factorial form (no vectorisation)."""
    y = int(y)
    if family == "poisson":
        if mu == 0:
            return 0.0 if y == 0 else -math.inf
        return y * math.log(mu) - mu - math.lgamma(y + 1)
    r = 1.0 / psi
    p = r / (r + mu)
    return (math.lgamma(y + r) - math.lgamma(r) - math.lgamma(y + 1)
            + r * math.log(p) + (y * math.log(1 - p) if y > 0 else 0.0))


def ee_mean_loop(y_prev, w, e, nu, lam, phi):
    """Conditional mean by explicit sums over neighbours (w symmetric 0/1)."""
    K = len(y_prev)
    out = np.zeros(K)
    for k in range(K):
        deg = sum(w[q][k] for q in range(K))
        nb = sum(w[q][k] / deg * y_prev[q] for q in range(K)) if deg > 0 else 0.0
        out[k] = e[k] * nu[k] + lam[k] * y_prev[k] + phi[k] * nb
    return out


def ee_loglik_loop(y, w, e, nu, lam, phi, family="poisson", psi=None):
    """Brute-force EE log-likelihood over days 1..N-1 with constant rates."""
    K, N = y.shape
    total = 0.0
    for t in range(1, N):
        mu = ee_mean_loop(y[:, t - 1], w, e, nu, lam, phi)
        for k in range(K):
            ps = None if psi is None else (psi[k] if np.ndim(psi) else psi)
            total += log_pmf(y[k, t], mu[k], family, ps)
    return total


def pearson_shifted(x, y, d):
    """Correlation of x[t-d] with y[t] on explicitly shifted copies."""
    a = [x[t - d] for t in range(d, len(x))]
    b = [y[t] for t in range(d, len(y))]
    return float(np.corrcoef(a, b)[0, 1])


def structure_by_index(w, K, Nt):
    """Place ones of the temporal and spatial structure matrices pair by pair."""
    n = K * Nt
    Z1 = np.zeros((n, n))
    Z2 = np.zeros((n, n))
    for k in range(K):
        for i in range(Nt):
            for l in range(K):
                for j in range(Nt):
                    a, b = k * Nt + i, l * Nt + j
                    if k == l and abs(i - j) == 1:
                        Z1[a, b] = 1.0
                    if i == j and w[k][l]:
                        Z2[a, b] = 1.0
    return Z1, Z2


def ar1_logdensity(phi, tau2, rho):
    """Scalar AR(1) Gaussian density, first value from N(0, tau2)."""
    lp = stats.norm.logpdf(phi[0], 0.0, math.sqrt(tau2))
    for t in range(1, len(phi)):
        lp += stats.norm.logpdf(phi[t], rho * phi[t - 1], math.sqrt(tau2))
    return float(lp)


def car_field_logdensity(phi, w, tau2, rho_s, rho_t):
    """AR(1) sequence of CAR fields via dense multivariate normal densities."""
    w = np.asarray(w, dtype=float)
    K, N = phi.shape
    Q = rho_s * (np.diag(w.sum(1)) - w) + (1 - rho_s) * np.eye(K)
    cov = tau2 * np.linalg.inv(Q)
    lp = stats.multivariate_normal.logpdf(phi[:, 0], np.zeros(K), cov)
    for t in range(1, N):
        lp += stats.multivariate_normal.logpdf(phi[:, t], rho_t * phi[:, t - 1], cov)
    return float(lp)


def poisson_deviance(y, mu):
    return float(-2.0 * sum(log_pmf(a, b, "poisson") for a, b in zip(np.ravel(y), np.ravel(mu))))


def dic_bruteforce(y, mu_samples):
    """DIC and pd from a list of fitted-mean arrays, one per posterior sample."""
    d = [poisson_deviance(y, m) for m in mu_samples]
    dbar = sum(d) / len(d)
    mbar = sum(mu_samples) / len(mu_samples)
    pd = dbar - poisson_deviance(y, mbar)
    return dbar + pd, pd


def inverse_gamma_moments(shape, rate):
    mean = rate / (shape - 1)
    var = rate ** 2 / ((shape - 1) ** 2 * (shape - 2))
    return mean, var


def kron_by_cholesky(blocks, sb):
    """Generalised Kronecker via explicit block loops."""
    N = len(blocks)
    K = blocks[0].shape[0]
    L = [np.linalg.cholesky(b) for b in blocks]
    out = np.zeros((N * K, N * K))
    for i in range(N):
        for j in range(N):
            out[i * K:(i + 1) * K, j * K:(j + 1) * K] = sb[i][j] * L[i] @ L[j].T
    return out
