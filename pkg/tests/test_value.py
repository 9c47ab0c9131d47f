import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from mfsingular.pack import bundled_scenario
from mfsingular.value import PolicyClass, dpp_check, evaluate_policy, solve_vk, vk_monotone_sweep

from conftest import line_scenario


@pytest.fixture(scope="module")
def min_xi():
    return bundled_scenario("min_xi")


@pytest.mark.parametrize("K, expected", [(0.5, 0.5), (2.0, 1.0)])
def test_capped_payoff(min_xi, K, expected):
    est = solve_vk(min_xi, K, budget=64)
    assert est.value == pytest.approx(expected, abs=1e-9)
    assert est.std_error == 0.0


def test_dominated_control_stays_off():
    sc = line_scenario(gamma="0", g="xi", c="2", steps=10, N=1)
    for K in (0.5, 3.0):
        est = solve_vk(sc, K, budget=64)
        assert est.value == pytest.approx(0.0, abs=1e-12)
        assert est.mean_rate == pytest.approx(0.0, abs=1e-12)


def test_sweep_closed_form(min_xi):
    ests, violations = vk_monotone_sweep(min_xi, [0.25, 0.5, 1, 2, 4], budget=64)
    assert [e.value for e in ests] == pytest.approx([0.25, 0.5, 1, 1, 1], abs=1e-3)
    assert violations == []


def test_sweep_rejects_decreasing_caps(min_xi):
    with pytest.raises(ValueError):
        vk_monotone_sweep(min_xi, [1.0, 0.5])


def test_plateau_matches_calculus_oracle():
    # marginal gain 2.5 below 0.5 and 0.5 above, marginal cost 1: stop at 0.5
    g = "2*min(xi, 0.5) + 0.5*xi"
    sc = line_scenario(gamma="0", g=g, c="1", steps=20, N=1)
    K = 2.0
    best = minimize_scalar(lambda z: -(2 * min(z, 0.5) + 0.5 * z - z), bounds=(0.0, K), method="bounded",
                           options={"xatol": 1e-10})
    est = solve_vk(sc, K, budget=512)
    assert est.value == pytest.approx(-best.fun, abs=1e-3)
    assert est.mean_rate == pytest.approx(best.x, abs=1e-2)


def test_random_smooth_scenario_is_monotone_in_k():
    sc = line_scenario(b="-0.5*x", sigma="0.3", gamma="1", f="-0.2*x^2", g="tanh(x) + 0.5*min(xi, 1)",
                       c="0.3 + 0.1*x^2", steps=10, N=200, extra='sampler = "normal"\nstd = [0.3, 0.0]\n')
    ests, violations = vk_monotone_sweep(sc, [0.25, 0.5, 1.0, 2.0], PolicyClass(("1", "x"), 1), budget=64, seed=2)
    assert violations == []
    assert all(e.std_error > 0 for e in ests)


def test_value_dominates_supplied_policy():
    sc = line_scenario(b="-x", sigma="0.4", g="x - 0.5*x^2", c="0.2", steps=10, N=100,
                       extra='sampler = "normal"\n')
    pc = PolicyClass(("1", "x"), 2)
    theta = np.array([0.3, -0.5, 0.8, 0.1])
    r, _ = evaluate_policy(sc, pc.policy(theta, 1.0, sc.coefficients, sc.t0, sc.T), seed=4)
    est = solve_vk(sc, 1.0, pc, budget=64, seed=4, extra_candidates=[theta])
    assert est.value >= r.mean()


def test_free_control_recovers_max_rate():
    sc = line_scenario(b="-x", sigma="0.3", g="tanh(xi) + x", steps=10, N=50, extra='sampler = "normal"\n')
    est = solve_vk(sc, 1.5, PolicyClass(("1", "x"), 2), budget=96, seed=1)
    assert est.mean_rate >= 0.95 * 1.5


def test_solver_is_deterministic_per_seed():
    sc = line_scenario(b="-x", sigma="0.4", g="x - 0.5*x^2", c="0.2", steps=10, N=50, extra='sampler = "normal"\n')
    a = solve_vk(sc, 1.0, budget=64, seed=9)
    b = solve_vk(sc, 1.0, budget=64, seed=9)
    assert a.value == b.value and np.array_equal(a.theta, b.theta)


def test_dpp_deterministic_family(min_xi):
    for K in (0.5, 2.0):
        rep = dpp_check(min_xi, 0.5, K, budget=64)
        assert abs(rep.gap) <= 1e-6
        assert rep.lhs == pytest.approx(min(K, 1.0), abs=1e-9)
        # a jump of 0.5 at a quarter of the horizon reaches the cap even at K = 0.5
        rep = dpp_check(min_xi, 0.5, K, budget=64, jump_candidates=[(0.25, 0.5)])
        assert abs(rep.gap) <= 1e-6
        assert rep.lhs == pytest.approx(1.0, abs=1e-9)


def test_dpp_uncontrolled_degenerate_case():
    sc = line_scenario(b="-x", sigma="0.3", f="-x^2", g="x", c="1000", steps=20, N=200,
                       extra='sampler = "normal"\n')
    rep = dpp_check(sc, 0.5, 1.0, budget=32, seed=3)
    r, _ = evaluate_policy(sc, None, seed=3)
    assert rep.lhs == pytest.approx(r.mean(), abs=1e-12)
    assert abs(rep.gap) <= 2 * rep.band


def test_dpp_split_must_be_interior(min_xi):
    with pytest.raises(ValueError):
        dpp_check(min_xi, 1.0, 1.0, budget=32)
