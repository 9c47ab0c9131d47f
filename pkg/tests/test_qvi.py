import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfsingular.jump_cost import measure_jump_cost
from mfsingular.measures import EmpiricalMeasure
from mfsingular.qvi import (CylinderFunctional, first_order_prediction, generator, intervention_margin,
                            ito_check, key_lemma_check, linear_derivative, moved_measure, qvi_residual,
                            richardson_slope)
from mfsingular.simulate import simulate

from conftest import coeffs, line_scenario


def _m(points, d=1, l=1):
    return EmpiricalMeasure(np.asarray(points, float), d, l)


SUPPORT = _m([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])


def test_linear_functional_derivative():
    u = CylinderFunctional("xi", "a0", 1, 1)
    ld = linear_derivative(u, 0.0, SUPPORT, np.array([[0.3]]), np.array([[1.7]]))
    assert ld.value[0] == pytest.approx(1.7)
    assert np.allclose(ld.grad, [[0.0, 1.0]]) and np.allclose(ld.hess_xx, 0.0)


def test_squared_mean_derivative():
    u = CylinderFunctional("x", "a0^2", 1, 1)
    ld = linear_derivative(u, 0.0, SUPPORT, np.array([[0.5]]), np.array([[0.0]]))
    assert ld.value[0] == pytest.approx(2 * 1.0 * 0.5)
    assert ld.grad[0, 0] == pytest.approx(2.0)


@given(st.integers(0, 2 ** 31))
def test_mixture_finite_difference(seed):
    rng = np.random.default_rng(seed)
    u = CylinderFunctional(["x*xi", "tanh(x) + xi^2"], "a0*a1 + exp(0.3*a0)", 1, 1)
    m = _m(rng.normal(size=(5, 2)))
    x, xi = rng.normal(size=(1, 1)), rng.normal(size=(1, 1))
    exact = linear_derivative(u, 0.0, m, x, xi).value[0] - linear_derivative(u, 0.0, m, m.x, m.xi).value.mean()
    errs = []
    for eps in (1e-3, 1e-4):
        fd = (u.mixture_value(0.0, m, x, xi, eps) - u(0.0, m)) / eps
        errs.append(abs(fd - exact))
    scale = 1.0 + abs(exact)
    # first-order convergence: ten times smaller eps, roughly ten times smaller error
    assert errs[1] <= 0.2 * errs[0] + 1e-7 * scale
    assert errs[1] <= 1e-2 * scale


def test_generator_of_static_functional():
    u = CylinderFunctional("x*xi", "a0^2", 1, 1)
    assert generator(u, 0.0, SUPPORT, coeffs()) == 0.0


def test_generator_of_mean_under_unit_drift():
    u = CylinderFunctional("x", "a0", 1, 1)
    assert generator(u, 0.0, SUPPORT, coeffs(b=["1"], sigma=[["0.7"]])) == pytest.approx(1.0)


def test_generator_of_second_moment_ito_correction():
    u = CylinderFunctional("x^2", "a0", 1, 1)
    assert generator(u, 0.0, SUPPORT, coeffs(sigma=[["1"]])) == pytest.approx(1.0)


def test_generator_time_derivative():
    u = CylinderFunctional("x", "t*a0", 1, 1)
    assert generator(u, 0.0, SUPPORT, coeffs()) == pytest.approx(1.0)


@pytest.mark.parametrize("c, margin", [("1", 0.0), ("2", 1.0)])
def test_margin_of_linear_functional(c, margin):
    u = CylinderFunctional("xi", "a0", 1, 1)
    assert intervention_margin(u, 0.0, SUPPORT, coeffs(c=[c])).margin == pytest.approx(margin)


def test_margin_violation_witness():
    u = CylinderFunctional("xi^2", "a0", 1, 1)
    w = intervention_margin(u, 0.0, SUPPORT, coeffs(c=["1"]))
    assert w.margin == pytest.approx(-3.0)
    assert w.xi[0] == 2.0 and w.on_support


def test_box_samples_extend_the_search():
    u = CylinderFunctional("xi^2", "a0", 1, 1)
    w = intervention_margin(u, 0.0, SUPPORT, coeffs(c=["1"]), box=([-1, -1], [3, 3]), n_samples=500)
    assert w.margin < -3.0 and not w.on_support


def test_boundary_residual_is_zero():
    u = CylinderFunctional("xi", "a0", 1, 1)
    r = qvi_residual(u, 0.5, SUPPORT, coeffs(c=["1"]))
    assert (r.hjb_part, r.intervention_part, r.residual) == (0.0, 0.0, 0.0)


@given(st.integers(0, 2 ** 31))
def test_supersolution_sweep(seed):
    rng = np.random.default_rng(seed)
    u = CylinderFunctional("xi", "a0", 1, 1)
    co = coeffs(b=["-x"], sigma=[["0.5"]], g="xi", c=["5"])
    m = _m(rng.normal(size=(6, 2)))
    for t in (0.0, 0.5, 1.0):
        r = qvi_residual(u, t, m, co, T=1.0, box=([-2, -2], [2, 2]), n_samples=50, seed=seed)
        assert r.residual >= -1e-9


def test_violator_residual_reports_witness():
    u = CylinderFunctional("xi^2", "a0", 1, 1)
    r = qvi_residual(u, 0.5, SUPPORT, coeffs(c=["1"]))
    assert r.residual == pytest.approx(-3.0) and r.witness.xi[0] == 2.0


def test_terminal_residual():
    u = CylinderFunctional("x + xi", "a0", 1, 1)
    co = coeffs(g="x + xi", c=["2"], gamma=[["0.5"]])
    r = qvi_residual(u, 1.0, SUPPORT, co, T=1.0)
    assert r.terminal and r.hjb_part == pytest.approx(0.0, abs=1e-12)
    assert r.residual >= -1e-9


def test_key_lemma_supersolution_slack():
    u = CylinderFunctional("xi", "a0", 1, 1)
    co = coeffs(c=["2"])
    rep = key_lemma_check(u, 0.0, SUPPORT, co, trials=5, seed=1, cost_kw={"M": 8, "lambda_steps": 4})
    assert rep.direction == "supersolution" and not rep.violation_found
    for tr in rep.trials:
        moved = len(tr["subset"]) / SUPPORT.N
        assert tr["cost"] - tr["gain"] == pytest.approx(tr["eps"] * moved, abs=1e-12)


def test_key_lemma_violator():
    u = CylinderFunctional("xi^2", "a0", 1, 1)
    rep = key_lemma_check(u, 0.0, SUPPORT, coeffs(c=["1"]), cost_kw={"M": 8, "lambda_steps": 4})
    assert rep.direction == "violator" and rep.violation_found
    tr = rep.trials[-1]
    assert tr["gain"] / tr["eps"] == pytest.approx(4.0 / 3, rel=0.01)
    assert tr["cost"] / tr["eps"] == pytest.approx(1.0 / 3, rel=1e-9)


def test_zero_move_is_an_equality():
    u = CylinderFunctional("xi^2", "a0", 1, 1)
    co = coeffs(c=["1"])
    m0 = moved_measure(SUPPORT, 0.0, co, [2], [1.0], 0.0)
    assert u(0.0, m0) - u(0.0, SUPPORT) == 0.0
    assert measure_jump_cost(0.0, SUPPORT, m0, co).value == 0.0


@given(st.integers(0, 2 ** 31))
def test_richardson_slope_matches_first_order(seed):
    rng = np.random.default_rng(seed)
    co = coeffs(d=2, l=2, gamma=[["0.5", "-1"], ["0.2", "0.3"]])
    u = CylinderFunctional(["x[0]*xi[1]", "tanh(x[1]) + xi[0]^2"], "a0 + a1^2 + a0*a1", 2, 2)
    m = _m(rng.normal(size=(8, 4)), 2, 2)
    subset = rng.choice(8, size=3, replace=False)
    v = rng.random(2)
    pred = first_order_prediction(u, 0.0, m, co, subset, v)
    slope = richardson_slope(u, 0.0, m, co, subset, v, 1e-3)
    assert slope == pytest.approx(pred, rel=1e-2, abs=1e-8)


def test_ito_identity_along_frozen_control():
    errs = []
    for steps in (20, 40):
        sc = line_scenario(b="1 - x + 0.5*mx", sigma="0.3", steps=steps, N=1000, moments='mx = "x"',
                           extra='sampler = "normal"\nmean = [1.0, 0.0]\n')
        r = ito_check(CylinderFunctional("x^2", "a0", 1, 1), simulate(sc, seed=2))
        assert r.error <= r.bound + 3 * r.band
        assert r.compensated_error <= r.bound
        errs.append(r.bound)
    assert errs[1] == pytest.approx(errs[0] / 2, rel=0.1)
