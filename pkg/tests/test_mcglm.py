import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg

from helpers import make_panel, path_adjacency, random_adjacency
from oracles import kron_by_cholesky, poisson_glm_irls, structure_by_index
from stcount.core import DataError, population_fractions
from stcount.mcglm import (McglmError, McglmParams, McglmSpec, build_panel_problem,
                           build_structure_matrices, covariance_matrix, estimating_functions,
                           fit_panel, fitted_matrix, gaussian_loglik, generalized_kronecker,
                           mcglm_fit, mcglm_forecast, mcglm_predict, pseudo_criteria,
                           pseudo_information)


def _random_spd(rng, K):
    a = rng.normal(size=(K, K))
    return a @ a.T + 0.1 * np.eye(K)


def _random_corr(rng, N):
    s = _random_spd(rng, N)
    d = 1 / np.sqrt(np.diag(s))
    return s * d[:, None] * d[None, :]


# -- generalised Kronecker -------------------------------------------------------

def test_kronecker_identity_blocks():
    rng = np.random.default_rng(0)
    sb = _random_corr(rng, 3)
    out = generalized_kronecker([np.eye(4)] * 3, sb)
    assert np.array_equal(out, np.kron(sb, np.eye(4)))


def test_kronecker_single_block_and_hand_example():
    s = _random_spd(np.random.default_rng(1), 3)
    np.testing.assert_allclose(generalized_kronecker([s], [[1.0]]), s, rtol=1e-14)
    out = generalized_kronecker([[[4.0]], [[9.0]]], [[1, 0.5], [0.5, 1]])
    np.testing.assert_allclose(out, [[4, 3], [3, 9]], rtol=1e-14)


@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.integers(1, 4))
def test_kronecker_matches_block_loop(seed, K, N):
    rng = np.random.default_rng(seed)
    blocks = [_random_spd(rng, K) for _ in range(N)]
    sb = _random_corr(rng, N)
    out = generalized_kronecker(blocks, sb)
    np.testing.assert_allclose(out, kron_by_cholesky(blocks, sb), rtol=1e-10, atol=1e-12)
    assert np.linalg.eigvalsh(out).min() > 0


def test_kronecker_rejects_bad_inputs():
    with pytest.raises(ValueError, match="unit diagonal"):
        generalized_kronecker([np.eye(2)] * 2, [[2, 0], [0, 1]])
    with pytest.raises(ValueError, match="positive definite"):
        generalized_kronecker([np.eye(2), -np.eye(2)], np.eye(2))


# -- structure matrices ----------------------------------------------------------

def test_structure_examples():
    Z1, Z2 = build_structure_matrices(np.zeros((1, 1)), 1, 3)
    np.testing.assert_array_equal(Z1, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert not Z2.any()
    _, Z2 = build_structure_matrices(np.array([[0, 1], [1, 0]]), 2, 1)
    np.testing.assert_array_equal(Z2, [[0, 1], [1, 0]])


@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.integers(1, 4))
def test_structure_matches_index_placement(seed, K, Nt):
    adj = random_adjacency(np.random.default_rng(seed), K)
    Z1, Z2 = build_structure_matrices(adj, K, Nt)
    R1, R2 = structure_by_index(adj.w, K, Nt)
    np.testing.assert_array_equal(Z1, R1)
    np.testing.assert_array_equal(Z2, R2)


# -- covariance ------------------------------------------------------------------

def test_covariance_examples():
    spec = McglmSpec(np.ones((2, 1)), 0.0, power=2.0, cov_link="identity")
    np.testing.assert_allclose(covariance_matrix(McglmParams([0.0], [1.0]), spec, [2.0, 3.0]),
                               np.diag([4.0, 9.0]))
    Z = np.array([[0, 1], [1, 0]])
    spec0 = McglmSpec(np.ones((2, 1)), 0.0, Z=(Z,), power=0.0, cov_link="identity")
    C = covariance_matrix(McglmParams([0.0], [2.0, 0.5]), spec0, [5.0, 7.0])
    np.testing.assert_allclose(C, [[2.0, 0.5], [0.5, 2.0]])
    spec_e = McglmSpec(np.ones((3, 1)), 0.0, power=0.0)
    np.testing.assert_allclose(covariance_matrix(McglmParams([0.0], [0.7]), spec_e, np.ones(3)),
                               math.exp(0.7) * np.eye(3), rtol=1e-14)


@given(st.integers(0, 2 ** 31))
def test_exponential_link_always_pd(seed):
    rng = np.random.default_rng(seed)
    Z1, Z2 = build_structure_matrices(random_adjacency(rng, 3), 3, 4)
    spec = McglmSpec(np.ones((12, 1)), 0.0, Z=(Z1, Z2), power=1.5)
    tau = rng.normal(scale=3, size=3)
    C = covariance_matrix(McglmParams([0.0], tau), spec, rng.uniform(0.5, 20, 12))
    assert np.linalg.eigvalsh(C).min() > 0


def test_identity_link_non_pd_is_an_error():
    Z = np.array([[0, 1], [1, 0]])
    spec = McglmSpec(np.ones((2, 1)), 0.0, Z=(Z,), cov_link="identity")
    with pytest.raises(McglmError, match="positive definite"):
        covariance_matrix(McglmParams([0.0], [1.0, 2.0]), spec, [1.0, 1.0])


def test_gaussian_loglik_at_mode():
    assert gaussian_loglik([0.3], np.array([0.3]), np.eye(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_pseudo_information_examples():
    assert pseudo_information(-13540.43, 28, 1000).pAIC == pytest.approx(27136.86, abs=1e-9)
    assert pseudo_information(-10448.25, 29, 1000).pAIC == pytest.approx(20954.50, abs=1e-9)
    pc = pseudo_information(-5.0, 3, 20)
    assert pc.pBIC == pytest.approx(10.0 + 3 * math.log(20), abs=1e-12)


# -- estimating functions (eigenbasis vs dense route) ----------------------------

def _dense_terms(beta, tau, spec, y):
    """Quasi-score, Pearson functions and sensitivities from explicit n x n matrices."""
    X = spec.design
    mu = np.exp(spec.offset + X @ beta)
    v = mu ** (spec.power / 2)
    Zs = spec.structure()
    if spec.cov_link == "identity":
        omega = sum(t * z for t, z in zip(tau, Zs))
        dom = Zs
    else:
        U = sum(t * z for t, z in zip(tau, Zs))
        omega = linalg.expm(U)
        dom = [linalg.expm_frechet(U, z, compute_expm=False) for z in Zs]
    C = v[:, None] * omega * v[None, :]
    Ci = np.linalg.inv(C)
    D = mu[:, None] * X
    r = y - mu
    score = D.T @ Ci @ r
    S_beta = D.T @ Ci @ D
    Cd = [v[:, None] * d * v[None, :] for d in dom]
    W = [Ci @ c @ Ci for c in Cd]
    pearson = np.array([r @ w @ r - np.trace(w @ C) for w in W])
    S_tau = np.array([[-np.trace(w @ c) for c in Cd] for w in W])
    return score, S_beta, pearson, S_tau


@pytest.mark.parametrize("link,power", [("exponential", 2.0), ("exponential", 1.0), ("identity", 1.5)])
def test_estimating_functions_match_dense(link, power):
    rng = np.random.default_rng(4)
    K, Nt = 3, 5
    Z1, Z2 = build_structure_matrices(path_adjacency(K), K, Nt)
    X = np.column_stack([np.ones(K * Nt), rng.normal(size=K * Nt)])
    spec = McglmSpec(X, rng.normal(scale=0.1, size=K * Nt), Z=(Z1, Z2), power=power, cov_link=link)
    y = rng.poisson(6, K * Nt).astype(float)
    beta = np.array([1.7, 0.2])
    tau = np.array([-0.5, 0.1, 0.05]) if link == "exponential" else np.array([0.6, 0.1, 0.05])
    got = estimating_functions(beta, tau, spec, y)
    ref = _dense_terms(beta, tau, spec, y)
    for a, b in zip(got, ref):
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)


# -- fitting ---------------------------------------------------------------------

def test_intercept_only_matches_glm():
    spec = McglmSpec(np.ones((3, 1)), 0.0, power=1.0, cov_link="identity")
    fit = mcglm_fit(spec, [1.0, 2.0, 3.0])
    assert fit.params.beta[0] == pytest.approx(math.log(2), abs=1e-6)
    assert fit.params.tau[0] == pytest.approx(1 / 3, abs=1e-6)
    np.testing.assert_allclose(fit.mu, 2.0, atol=1e-6)
    assert fit.df == 2


def test_constant_response_hits_boundary():
    spec = McglmSpec(np.ones((6, 1)), 0.0, power=1.0, cov_link="identity")
    fit = mcglm_fit(spec, np.full(6, 4.0))
    np.testing.assert_allclose(fit.mu, 4.0, rtol=1e-8)
    assert fit.convergence["boundary"]


def test_beta_root_invariant_to_scaling_c():
    rng = np.random.default_rng(7)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = rng.poisson(np.exp(1 + 0.3 * X[:, 1])).astype(float)
    spec = McglmSpec(X, 0.0, power=1.0, cov_link="identity")
    fit = mcglm_fit(spec, y, tol=1e-12)

    def beta_root(tau0):
        b = np.zeros(2)
        for _ in range(100):
            score, S, _, _ = estimating_functions(b, [tau0], spec, y)
            step = np.linalg.solve(S, score)
            b = b + step
            if np.max(np.abs(step)) < 1e-14:
                break
        return b

    t = fit.params.tau[0]
    np.testing.assert_allclose(beta_root(2 * t), beta_root(t), atol=1e-8)
    np.testing.assert_allclose(beta_root(t), fit.params.beta, atol=1e-8)


def test_poisson_independent_matches_irls():
    rng = np.random.default_rng(8)
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(size=n)])
    off = np.log(rng.uniform(0.5, 2, n))
    y = rng.poisson(np.exp(off + X @ [1.0, 0.4, -0.5])).astype(float)
    fit = mcglm_fit(McglmSpec(X, off, power=1.0, cov_link="identity"), y)
    np.testing.assert_allclose(fit.params.beta, poisson_glm_irls(X, y, off), atol=1e-6)


def test_fit_criteria_agree_with_explicit_covariance():
    rng = np.random.default_rng(9)
    panel = make_panel(rng.poisson(20, (4, 15)))
    fit = fit_panel(panel, path_adjacency(4), population_fractions(np.ones(4)))
    pc = pseudo_criteria(fit)
    assert pc.plogLik == pytest.approx(fit.plogLik, rel=1e-10)
    assert fit.pAIC == pytest.approx(-2 * fit.plogLik + 2 * fit.df, abs=1e-9)
    assert fit.pBIC == pytest.approx(-2 * fit.plogLik + fit.df * math.log(fit.spec.n), abs=1e-9)
    assert fit.df == fit.spec.q + 3
    assert fitted_matrix(fit).shape == (4, 14)


def test_fit_errors():
    with pytest.raises(McglmError, match="full column rank"):
        mcglm_fit(McglmSpec(np.ones((5, 2)), 0.0), np.arange(5.0))
    with pytest.raises(McglmError, match="max_n"):
        McglmSpec(np.ones((11, 1)), 0.0, max_n=10)
    with pytest.raises(ValueError, match="cov_link"):
        McglmSpec(np.ones((3, 1)), 0.0, cov_link="log")


def test_predict_examples():
    spec = McglmSpec(np.ones((2, 1)), 0.0, power=1.0, cov_link="identity")
    fit = mcglm_fit(spec, [2.0, 2.0])
    from dataclasses import replace
    zero = replace(fit, params=McglmParams(np.array([0.0]), fit.params.tau))
    np.testing.assert_allclose(mcglm_predict(zero, np.ones((2, 1)), np.log([0.5, 0.5])), [0.5, 0.5])
    np.testing.assert_allclose(mcglm_predict(zero, np.zeros((3, 1)), 0.0), 1.0)
    fit3 = mcglm_fit(spec.__class__(np.ones((3, 1)), 0.0, power=1.0, cov_link="identity"), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(mcglm_predict(fit3, np.ones((3, 1)), 0.0), 2.0, atol=1e-6)
    with pytest.raises(DataError):
        mcglm_predict(fit3, np.array([[np.nan]]), 0.0)
    with pytest.raises(ValueError, match="columns"):
        mcglm_predict(fit3, np.ones((1, 2)), 0.0)


def test_panel_forecast_first_step():
    rng = np.random.default_rng(10)
    panel = make_panel(rng.poisson(15, (3, 20)))
    fit = fit_panel(panel, path_adjacency(3), population_fractions([1, 2, 3]))
    fc = mcglm_forecast(fit, panel, 3)
    X, off = fit.layout.rows([panel.N], panel.values[:, -1:])
    np.testing.assert_allclose(fc.mean[:, 0], mcglm_predict(fit, X, off), rtol=1e-12)
    assert fc.mean.shape == (3, 3) and np.all(fc.lo95 <= fc.hi95)


def test_panel_problem_layout():
    panel = make_panel(np.ones((2, 6), dtype=int) * 3)
    spec, y, layout = build_panel_problem(panel, path_adjacency(2), population_fractions([1, 1]))
    assert spec.n == 2 * 5 and layout.t0 == 1
    assert spec.column_names == ("region[R0]", "region[R1]", "y_lag1")
