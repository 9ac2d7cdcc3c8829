import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import make_panel, path_adjacency
from oracles import ee_loglik_loop, ee_mean_loop
from stcount.core import Adjacency, CovariatePanel, population_fractions
from stcount.ee import (EEConvergenceError, EEParams, EESpec, ee_decompose, ee_fit, ee_forecast,
                        ee_information_criteria, ee_loglik, ee_loglik_grad, ee_mean,
                        ee_one_step_ahead, information_criteria, pack, param_names,
                        predictive_quantiles, unpack)
from stcount.simulate import SimScenario, simulate_ee, eight_region_adjacency

PAIR = Adjacency(["A", "B"], [[0, 1], [1, 0]])


def single_region_spec(family="poisson", components=("endemic",)):
    return EESpec(Adjacency(["R0"], [[0]]), population_fractions([1.0]), family=family,
                  components=frozenset(components))


def test_mean_hand_example():
    spec = EESpec(PAIR, population_fractions([1, 1]))
    m = ee_mean(EEParams.from_natural(nu=2, lam=0.5, phi=0.1), spec, [10, 20], t=1)
    assert m.mean[0] == pytest.approx(8.0, abs=1e-12)
    assert (m.endemic[0], m.own[0], m.neighbours[0]) == pytest.approx((1.0, 5.0, 2.0))


def test_mean_pure_endemic_and_zero_history():
    spec = EESpec(PAIR, population_fractions([1, 3]), components=frozenset({"endemic"}))
    m = ee_mean(EEParams.from_natural(nu=4), spec, [10, 20], t=3)
    np.testing.assert_allclose(m.mean, [1.0, 3.0])
    full = EESpec(PAIR, population_fractions([1, 3]))
    m = ee_mean(EEParams.from_natural(nu=4, lam=0.7, phi=0.3), full, [0, 0], t=3)
    np.testing.assert_allclose(m.mean, [1.0, 3.0])


@given(st.integers(0, 2 ** 31))
def test_mean_matches_loop(seed):
    rng = np.random.default_rng(seed)
    adj = eight_region_adjacency()
    pops = rng.uniform(1e4, 1e6, 8)
    spec = EESpec(adj, population_fractions(pops), per_region=frozenset({"nu", "lambda", "phi"}))
    nu, lam, phi = rng.uniform(0.1, 30, 8), rng.uniform(0.01, 1, 8), rng.uniform(0.01, 1, 8)
    y_prev = rng.poisson(20, 8)
    m = ee_mean(EEParams.from_natural(nu=nu, lam=lam, phi=phi), spec, y_prev, t=5)
    ref = ee_mean_loop(y_prev, adj.w, spec.offset.fractions, nu, lam, phi)
    np.testing.assert_allclose(m.mean, ref, rtol=1e-12)


def test_loglik_single_cells():
    panel = make_panel(np.array([[7, 0]]))
    assert ee_loglik(EEParams.from_natural(nu=1.0), single_region_spec(), panel) == pytest.approx(-1.0)
    nb = single_region_spec("negbin1")
    assert ee_loglik(EEParams.from_natural(nu=1.0, psi=1.0), nb, panel) == pytest.approx(math.log(0.5),
                                                                                          abs=1e-12)


def test_negbin_tends_to_poisson():
    rng = np.random.default_rng(3)
    panel = make_panel(rng.poisson(6, (2, 12)), regions=["A", "B"])
    p = dict(nu=5.0, lam=0.4, phi=0.2)
    pois = ee_loglik(EEParams.from_natural(**p), EESpec(PAIR, population_fractions([1, 2])), panel)
    nb = ee_loglik(EEParams.from_natural(**p, psi=1e-8),
                   EESpec(PAIR, population_fractions([1, 2]), family="negbin1"), panel)
    assert nb == pytest.approx(pois, abs=1e-4)


@given(st.integers(0, 2 ** 31), st.sampled_from(["poisson", "negbin1", "negbinm"]))
def test_loglik_matches_bruteforce(seed, family):
    rng = np.random.default_rng(seed)
    K, N = 4, 8
    adj = path_adjacency(K)
    pops = rng.uniform(1e3, 1e5, K)
    spec = EESpec(adj, population_fractions(pops), family=family,
                  per_region=frozenset({"nu", "lambda", "phi"}))
    nu, lam, phi = rng.uniform(0.5, 20, K), rng.uniform(0.05, 1, K), rng.uniform(0.05, 1, K)
    psi = None if family == "poisson" else (rng.uniform(0.01, 1, 1) if family == "negbin1"
                                            else rng.uniform(0.01, 1, K))
    panel = make_panel(rng.poisson(8, (K, N)))
    ll = ee_loglik(EEParams.from_natural(nu=nu, lam=lam, phi=phi, psi=psi), spec, panel)
    ps = None if psi is None else (psi[0] if family == "negbin1" else psi)
    ref = ee_loglik_loop(panel.values, adj.w, spec.offset.fractions, nu, lam, phi, family, ps)
    assert ll == pytest.approx(ref, abs=1e-10)


def _rich_spec(rng, K=3, N=20, family="negbinm"):
    adj = path_adjacency(K)
    cov = CovariatePanel("x", rng.normal(size=(K, N)), regions=adj.regions)
    spec = EESpec(adj, population_fractions(rng.uniform(1, 2, K)), family=family,
                  endemic_covariates=(cov,), per_region=frozenset({"nu"}),
                  harmonics={"nu": 1, "lambda": 1}, period=7.0)
    return spec, make_panel(rng.poisson(10, (K, N)))


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(5)
    spec, panel = _rich_spec(rng)
    for _ in range(3):
        theta = rng.normal(scale=0.3, size=len(param_names(spec)))
        params = unpack(theta, spec)
        g = ee_loglik_grad(params, spec, panel)
        fd = np.zeros_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-6
            fd[i] = (ee_loglik(unpack(theta + e, spec), spec, panel)
                     - ee_loglik(unpack(theta - e, spec), spec, panel)) / 2e-6
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(6)
    spec, _ = _rich_spec(rng)
    theta = rng.normal(size=len(param_names(spec)))
    np.testing.assert_allclose(pack(unpack(theta, spec), spec), theta, rtol=1e-13, atol=1e-15)
    assert param_names(spec)[:3] == ["alpha_nu[R0]", "alpha_nu[R1]", "alpha_nu[R2]"]


def test_endemic_only_mle_is_the_mean():
    y = np.array([[9, 2, 4, 3, 1, 5, 3, 2, 4, 3, 3]])  # days 1.. average 3
    fit = ee_fit(single_region_spec(), make_panel(y))
    assert math.exp(fit.theta[0]) == pytest.approx(3.0, abs=1e-6)
    assert fit.convergence["converged"] and not fit.convergence["boundary"]


def test_all_zero_panel_reports_boundary():
    fit = ee_fit(single_region_spec(), make_panel(np.zeros((1, 12), dtype=int)))
    assert fit.convergence["converged"] and fit.convergence["boundary"]
    assert math.exp(fit.theta[0]) < 1e-6


def test_nonconvergence_carries_best_iterate():
    y = np.random.default_rng(0).poisson(5, (1, 15))
    with pytest.raises(EEConvergenceError) as err:
        ee_fit(single_region_spec(), make_panel(y), gtol=0.0, rtol=0.0)
    assert err.value.best_theta is not None and np.isfinite(err.value.best_loglik)


def test_short_panel_rejected():
    with pytest.raises(Exception, match="at least 10 days"):
        ee_fit(single_region_spec(), make_panel(np.ones((1, 5), dtype=int)))


def test_decomposition_examples():
    def shares(e, o, n):
        return ee_decompose(SimpleNamespace(parts=tuple(np.array([[v]], dtype=float) for v in (e, o, n))))
    assert shares(1.0, 5.0, 2.0) == pytest.approx((12.5, 62.5, 25.0))
    assert shares(0.0, 3.0, 0.0) == pytest.approx((0.0, 100.0, 0.0))


def test_information_criteria_examples():
    assert information_criteria(-8559.39, 4, 1000).aic == pytest.approx(17126.78, abs=1e-9)
    assert information_criteria(-8558.74, 5, 1000).aic == pytest.approx(17127.48, abs=1e-9)
    ic = information_criteria(0.0, 0, 50)
    assert ic.aic == 0.0 and ic.bic == 0.0


def test_poisson_interval_at_eight():
    lo, med, hi = predictive_quantiles(8.0, "poisson")
    assert (lo, med, hi) == (3.0, 8.0, 14.0)


def test_persistence_dynamics_forecast():
    spec = EESpec(PAIR, population_fractions([1, 1]), components=frozenset({"own"}))
    params = EEParams(alpha_lambda=np.array([0.0]))
    fake = SimpleNamespace(spec=spec, theta=pack(params, spec), params=params)
    panel = make_panel(np.array([[1, 4, 6], [2, 3, 9]]), regions=["A", "B"])
    fc = ee_forecast(fake, panel, 4, rng=0)
    np.testing.assert_array_equal(fc.mean, [[6] * 4, [9] * 4])


@pytest.fixture(scope="module")
def small_fit():
    scn = SimScenario("ee", 8, 120, eight_region_adjacency(), np.linspace(5e4, 4e5, 8), seed=11,
                      ee_params=EEParams.from_natural(nu=30, lam=0.5, phi=0.2))
    panel, covs, spec = simulate_ee(scn)
    return ee_fit(spec, panel), panel


def test_fit_summaries(small_fit):
    fit, panel = small_fit
    shares = ee_decompose(fit)
    assert sum(shares) == pytest.approx(100.0, abs=1e-9)
    assert all(0 <= s <= 100 for s in shares)
    ic = ee_information_criteria(fit)
    assert ic.n_obs == 8 * 119 and ic.n_params == 3
    assert np.all(fit.fitted_means > 0)


def test_one_step_uses_plugin_means(small_fit):
    fit, panel = small_fit
    fc = ee_one_step_ahead(fit, panel, 100, 119)
    for j, t in enumerate(range(100, 120)):
        m = ee_mean(fit.params, fit.spec, panel.values[:, t - 1], t)
        np.testing.assert_allclose(fc.mean[:, j], m.mean, rtol=1e-12)
    assert np.all(fc.lo95 <= fc.median) and np.all(fc.median <= fc.hi95)


def test_forecast_is_seeded(small_fit):
    fit, panel = small_fit
    a = ee_forecast(fit, panel, 5, rng=3)
    b = ee_forecast(fit, panel, 5, rng=3)
    np.testing.assert_array_equal(a.hi95, b.hi95)
    assert np.all(a.lo95 <= a.median) and np.all(a.median <= a.hi95)


def test_fit_is_permutation_equivariant(small_fit):
    fit, panel = small_fit
    order = [3, 0, 7, 1, 6, 2, 5, 4]
    adj = fit.spec.adjacency.permuted(order)
    pp = panel.__class__([panel.regions[i] for i in order], panel.dates, panel.values[order])
    spec = EESpec(adj, population_fractions(fit.spec.offset.populations[order]))
    refit = ee_fit(spec, pp)
    np.testing.assert_allclose(refit.fitted_means, fit.fitted_means[order], rtol=1e-5)
