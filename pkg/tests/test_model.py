import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfsingular.expr import Expression, ExprSyntaxError
from mfsingular.model import (ScenarioError, check_standing_assumptions, format_scenario, parse_scenario)

from conftest import coeffs

MINIMAL = """
[dims]
d = 1
l = 1
[coefficients]
b = ["0"]
sigma = [["0"]]
gamma = [["1"]]
f = "0"
g = "xi"
c = ["1"]
"""


def test_minimal_scenario():
    sc = parse_scenario(MINIMAL)
    co = sc.coefficients
    x = np.array([[0.3], [1.0]])
    xi = np.array([[2.0], [0.5]])
    assert np.allclose(co.eval_g({}, x, xi), [2.0, 0.5])
    assert np.allclose(co.eval_c(0.0, {}, x, xi), [[1.0], [1.0]])
    assert np.allclose(co.eval_gamma(0.3), [[1.0]])


def test_moment_expression_on_point_mass():
    sc = parse_scenario(MINIMAL.replace("[coefficients]", '[moments]\nmom1_xi = "xi"\n[coefficients]')
                        .replace('f = "0"', 'f = "x*mom1_xi + t"'))
    co = sc.coefficients
    x, xi = np.array([[2.0]]), np.array([[3.0]])
    assert co.eval_f(1.0, co.moments(x, xi), x, xi)[0] == pytest.approx(7.0)


def test_dangling_operator_reports_position():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(MINIMAL.replace('g = "xi"', 'g = "xi +"'))
    assert err.value.line == 10 and err.value.col is not None


def test_unknown_identifier_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL.replace('g = "xi"', 'g = "zeta"'))


def test_undeclared_moment_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL.replace('f = "0"', 'f = "mom2"'))


def test_sigma_measure_dependence_rejected():
    text = MINIMAL.replace("[coefficients]", '[moments]\nmx = "x"\n[coefficients]').replace('[["0"]]', '[["mx"]]')
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_dimension_mismatch_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL.replace('c = ["1"]', 'c = ["1", "2"]'))


def test_horizon_validation():
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL + "[discretization]\nt0 = 1.0\nT = 0.5\n")


def test_expression_indices_and_functions():
    e = Expression("min(xi[0], 1) + max(x, 0)^2 + exp(0) - (t >= 0.5)", {"x": 1, "xi": 2, "t": None})
    env = {"x": np.array([[-1.0], [2.0]]), "xi": np.array([[3.0, 0.0], [0.5, 0.0]]), "t": 1.0}
    assert np.allclose(e(env, (2,)), [1.0 + 0.0 + 1.0 - 1.0, 0.5 + 4.0 + 1.0 - 1.0])


def test_expression_syntax_error_column():
    with pytest.raises(ExprSyntaxError) as err:
        Expression("1 + * 2")
    assert err.value.col == 5


@given(st.floats(-2, 2), st.floats(0.1, 2), st.floats(-1, 1))
def test_symbolic_derivative_matches_finite_difference(x, xi, a):
    names = {"x": 1, "xi": 1, "a": None}
    e = Expression("x^3*xi + tanh(a*x) + log(xi)*exp(-x) + sqrt(xi)*a", names)
    env = {"x": np.array([x]), "xi": np.array([xi]), "a": a}
    h = 1e-6
    for var, arr in (("x", "x"), ("xi", "xi")):
        d = e.derivative(var, 0)
        up = dict(env, **{arr: env[arr] + h})
        dn = dict(env, **{arr: env[arr] - h})
        fd = (float(e(up)) - float(e(dn))) / (2 * h)
        assert float(d(env)) == pytest.approx(fd, rel=1e-5, abs=1e-6)


@given(st.integers(0, 2 ** 31))
def test_format_parse_roundtrip_is_evaluation_equivalent(seed):
    rng = np.random.default_rng(seed)
    text = """
[dims]
d = 2
l = 1
[moments]
mx = "x[0]"
[coefficients]
b = ["0.5*(mx - x[0])", "x[1]*xi"]
sigma = [["0.3", "0"], ["0", "0.1*x[1]"]]
gamma = [["1"], ["t"]]
f = "-(x[0] - 1)^2 + min(xi, 2)"
g = "x[1]*mx"
c = ["1 + 0.5*abs(x[0])"]
[discretization]
steps = 17
particles = 3
[initial]
sampler = "normal"
std = [0.2, 0.3, 0.0]
seed = 5
"""
    a = parse_scenario(text)
    b = parse_scenario(format_scenario(a))
    assert a.hash() == b.hash()
    x = rng.normal(size=(5, 2))
    xi = rng.random((5, 1))
    t = float(rng.random())
    ca, cb = a.coefficients, b.coefficients
    ma, mb = ca.moments(x, xi), cb.moments(x, xi)
    for name in ("eval_b", "eval_f", "eval_c"):
        assert np.allclose(getattr(ca, name)(t, ma, x, xi), getattr(cb, name)(t, mb, x, xi), atol=1e-12)
    assert np.allclose(ca.eval_sigma(t, x, xi), cb.eval_sigma(t, x, xi), atol=1e-12)
    assert np.allclose(ca.eval_g(ma, x, xi), cb.eval_g(mb, x, xi), atol=1e-12)
    assert np.allclose(ca.eval_gamma(t), cb.eval_gamma(t))
    xa, za = a.initial_ensemble()
    xb, zb = b.initial_ensemble()
    assert np.array_equal(xa, xb) and np.array_equal(za, zb)


def test_hash_ignores_formatting():
    a = parse_scenario(MINIMAL)
    b = parse_scenario(MINIMAL.replace('g = "xi"', 'g   =   "xi"   # payoff').replace("\n", "\n\n"))
    assert a.hash() == b.hash()


def _status(report, prefix):
    return [e.status for e in report if e.name.startswith(prefix)][0]


def test_assumptions_linear_coefficients_pass():
    rep = check_standing_assumptions(coeffs(b=["x"], sigma=[["1"]]))
    assert _status(rep, "lipschitz b, sigma") == "pass"
    worst = [e for e in rep if e.name.startswith("lipschitz b, sigma")][0].worst_ratio
    assert worst == pytest.approx(1.0, rel=0.05)


def test_assumptions_cubic_running_reward_warns():
    rep = check_standing_assumptions(coeffs(f="xi^3"), box=3.0)
    assert _status(rep, "quadratic growth") == "warn"


def test_assumptions_exponential_cost_warns():
    rep = check_standing_assumptions(coeffs(c=["exp(x)"]), box=3.0)
    assert _status(rep, "linear growth c") == "warn"


def test_assumptions_non_finite_is_reported():
    rep = check_standing_assumptions(coeffs(f="log(x)"))
    assert any(e.status == "warn" and "non-finite" in e.detail for e in rep)
