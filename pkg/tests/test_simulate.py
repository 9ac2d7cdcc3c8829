import numpy as np
import pytest
from scipy import stats

from helpers import make_panel, path_adjacency
from oracles import ee_mean_loop
from stcount.carbayes import leroux_precision
from stcount.core import population_fractions
from stcount.ee import EEParams, EESpec
from stcount.simulate import (ExplosiveSimulation, SimScenario, inject_weekday_artifact,
                              scenario_from_dict, simulate_car, simulate_car_field, simulate_ee,
                              simulate_ee_day, eight_region_adjacency)

POPS8 = np.linspace(5e4, 4e5, 8)


def ee_scenario(params, N=50, seed=0, **kw):
    return SimScenario("ee", 8, N, eight_region_adjacency(), POPS8, seed=seed, ee_params=params, **kw)


def test_iid_poisson_when_no_epidemic_terms():
    adj = path_adjacency(2)
    scn = SimScenario("ee", 2, 10000, adj, [1e5, 3e5], seed=1, ee_params=EEParams.from_natural(nu=40))
    panel, _, spec = simulate_ee(scn)
    expected = spec.offset.fractions * 40
    np.testing.assert_allclose(panel.values.mean(axis=1), expected, rtol=0.02)


def test_zero_endemic_and_zero_start_is_absorbing():
    panel, _, _ = simulate_ee(ee_scenario(EEParams.from_natural(lam=0.9, phi=0.5)))
    assert not panel.values.any()


def test_fixed_seed_is_bit_identical():
    p = EEParams.from_natural(nu=30, lam=0.5, phi=0.2, psi=0.1)
    a, _, _ = simulate_ee(ee_scenario(p, seed=4, family="negbin1"))
    b, _, _ = simulate_ee(ee_scenario(p, seed=4, family="negbin1"))
    c, _, _ = simulate_ee(ee_scenario(p, seed=5, family="negbin1"))
    assert np.array_equal(a.values, b.values) and not np.array_equal(a.values, c.values)
    s = SimScenario("car", 8, 30, eight_region_adjacency(), POPS8, seed=2, beta=(2.0, 0.5))
    assert np.array_equal(simulate_car(s)[0].values, simulate_car(s)[0].values)


def test_explosive_configuration_is_reported():
    with pytest.raises(ExplosiveSimulation, match="on day"):
        simulate_ee(ee_scenario(EEParams.from_natural(nu=50, lam=3.0, phi=1.0), N=200))


@pytest.mark.parametrize("family,psi", [("poisson", None), ("negbin1", 0.2)])
def test_one_day_conditional_means(family, psi):
    adj = eight_region_adjacency()
    spec = EESpec(adj, population_fractions(POPS8), family=family)
    params = EEParams.from_natural(nu=60, lam=0.4, phi=0.3, psi=psi)
    y_prev = np.array([3, 10, 0, 25, 7, 1, 14, 5])
    n = 100000
    draws = simulate_ee_day(spec, params, y_prev, 4, n, np.random.default_rng(0))
    mu = ee_mean_loop(y_prev, adj.w, spec.offset.fractions, np.full(8, 60.0), np.full(8, 0.4),
                      np.full(8, 0.3))
    se = np.sqrt(mu * (1 + (psi or 0) * mu) / n)
    assert np.all(np.abs(draws.mean(axis=1) - mu) < 3 * se)


def test_car_tiny_variance_is_poisson():
    s = SimScenario("car", 8, 100, eight_region_adjacency(), POPS8, seed=3, beta=(5.0, 0.3), tau2=1e-12)
    panel, covs, phi = simulate_car(s)
    off = np.log(population_fractions(POPS8).fractions)
    mu = np.exp(5.0 + 0.3 * covs[0].values + off[:, None])
    chi2 = float(np.sum((panel.values - mu) ** 2 / mu))
    assert stats.chi2.sf(chi2, mu.size) > 0.01


def test_car_field_uncorrelated_in_time_when_rho_t_zero():
    adj = path_adjacency(3)
    phi = simulate_car_field(adj.w, 10001, 0.5, 0.6, 0.0, np.random.default_rng(1))
    for k in range(3):
        assert abs(np.corrcoef(phi[k, :-1], phi[k, 1:])[0, 1]) < 0.05


def test_car_field_first_day_covariance():
    adj = eight_region_adjacency()
    tau2, rho_s = 0.3, 0.7
    rng = np.random.default_rng(2)
    draws = np.array([simulate_car_field(adj.w, 1, tau2, rho_s, 0.5, rng)[:, 0] for _ in range(10000)])
    target = tau2 * np.linalg.inv(leroux_precision(adj, rho_s))
    scale = np.sqrt(np.outer(np.diag(target), np.diag(target)))
    assert np.max(np.abs(np.cov(draws.T) - target) / scale) < 0.05


def test_car_field_rejects_singular_precision():
    with pytest.raises(Exception, match="singular"):
        simulate_car_field(np.zeros((2, 2)), 3, 1.0, 1.0, 0.5, np.random.default_rng(0))


def test_weekday_artifact():
    panel = make_panel(np.full((2, 14), 10))
    assert np.array_equal(inject_weekday_artifact(panel, np.ones(7)).values, panel.values)
    m = np.array([1, 1, 1, 1, 1, 0, 0.0])
    out = inject_weekday_artifact(panel, m)
    for j, d in enumerate(panel.dates):
        assert (out.values[:, j] == 0).all() == (d.weekday() >= 5)
    assert (inject_weekday_artifact(panel, np.full(7, 0.5)).values == 5).all()


def test_scenario_from_dict():
    scn = scenario_from_dict({"generator": "ee", "N": 20, "family": "negbin1",
                              "params": {"nu": 10, "lambda": 0.5, "phi": 0.1, "beta": [0.2], "psi": 0.3}},
                             seed=7)
    assert scn.K == 8 and scn.seed == 7 and scn.n_covariates == 1
    panel, covs, spec = simulate_ee(scn)
    assert panel.N == 20 and covs[0].name == "x1" and spec.family == "negbin1"
    car = scenario_from_dict({"generator": "car", "N": 10, "params": {"beta": [1.0], "tau2": 0.1,
                                                                      "rho_s": 0.5, "rho_t": 0.3}})
    assert simulate_car(car)[0].K == 8
