from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfsingular.jump_cost import PathwiseJumpQuery, pathwise_jump_cost
from mfsingular.model import parse_scenario
from mfsingular.parametrise import (ApproximationParams, TimeChange, bounded_velocity_approximation,
                                    build_parametrisation, lipschitz_approximation)
from mfsingular.paths import CadlagPath, MonotoneControlPath
from mfsingular.reward import (RewardError, reward_continuous, reward_continuous_breakdown, reward_explicit,
                               reward_naive, reward_parametrisation)
from mfsingular.simulate import ControlPolicy, simulate

from conftest import line_scenario


def _ramp(sc, rate):
    return simulate(sc, ControlPolicy.from_expressions(str(rate), 10.0, sc.coefficients))


def test_terminal_payoff_of_ramp():
    assert reward_continuous(_ramp(line_scenario(), 1)) == pytest.approx(1.0, abs=1e-12)


def test_running_reward_is_clock_integral():
    sim = simulate(line_scenario(f="1", g="0", T=1.5, steps=7))
    assert reward_continuous(sim) == pytest.approx(1.5, abs=1e-12)


def test_constant_marginal_cost():
    b = reward_continuous_breakdown(_ramp(line_scenario(g="0", c="1"), 2))
    assert (b.running, b.terminal, b.cost_continuous) == pytest.approx((0.0, 0.0, 2.0), abs=1e-12)
    assert b.total == pytest.approx(-2.0, abs=1e-12)


def test_continuous_reward_rejects_jumps():
    sim = simulate(line_scenario(), ControlPolicy.none().with_jump(0.5, 1.0))
    with pytest.raises(RewardError, match="stamp 5"):
        reward_continuous(sim)


def test_explicit_without_jumps_matches_continuous():
    sc = line_scenario(b="-x", sigma="0.3", f="-x^2", g="x", c="1 + 0.5*x", steps=20, N=50,
                       extra='sampler = "normal"\n')
    sim = simulate(sc, ControlPolicy.from_expressions("1 - x", 2.0, sc.coefficients), seed=3)
    e = reward_explicit(sim)
    assert e.cost_first_kind == 0.0 and e.cost_second_kind == 0.0
    assert e.total == pytest.approx(reward_continuous(sim), abs=1e-15)


def test_synchronised_jump_pays_line_integral():
    sc = line_scenario(g="0", c="xi", steps=10, N=3, extra='sampler = "normal"\nstd = [1.0, 0.0]\n')
    e = reward_explicit(simulate(sc, ControlPolicy.none().with_jump(0.5, 2.0)))
    assert e.cost_second_kind == pytest.approx(2.0, abs=1e-12)
    assert e.total == pytest.approx(-2.0, abs=1e-12)


def _one_particle_jump(N, sigma="0.2", steps=100, c="1 + x"):
    sc = line_scenario(b="-x", sigma=sigma, g="0", c=c, steps=steps, N=N, extra='sampler = "normal"\nstd = [0.5, 0.0]\n')
    grid = np.linspace(0, 1, steps + 1)
    flat = MonotoneControlPath(grid, np.zeros((steps + 1, 1)), np.zeros((steps + 1, 1)))
    jl, jr = np.zeros((steps + 1, 1)), np.zeros((steps + 1, 1))
    jr[steps // 2:] = 1.0
    jl[steps // 2 + 1:] = 1.0
    return sc, simulate(sc, ControlPolicy.prescribed([MonotoneControlPath(grid, jl, jr)] + [flat] * (N - 1)), seed=5)


def test_first_kind_jump_charged_per_particle():
    N = 100
    sc, sim = _one_particle_jump(N)
    e = reward_explicit(sim, eta_meas=0.2)
    assert e.cost_second_kind == 0.0
    k = 50
    q = PathwiseJumpQuery(0.5, sim.X_left[k, 0], sim.xi_left[k, 0], sim.xi_right[k, 0], m=sim.measure(k, "left"))
    assert e.cost_first_kind == pytest.approx(pathwise_jump_cost(q, sc.coefficients).value / N, abs=1e-15)


def test_first_kind_jump_matches_bounded_velocity_limit():
    sc, sim = _one_particle_jump(100, steps=400)
    target = reward_explicit(sim, eta_meas=0.2).total
    p = build_parametrisation(sim)
    gaps = []
    for delta in (0.1, 0.05, 0.025):
        q = lipschitz_approximation(p, ApproximationParams(10.0, delta / 2, delta))
        a = bounded_velocity_approximation(q, delta / 2, delta)
        gaps.append(abs(reward_continuous(simulate(sc, a.policy, seed=5)) - target))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] <= max(0.05 * abs(target), 0.01)


def test_naive_equals_explicit_for_constant_cost():
    sc = line_scenario(b="-x", sigma="0.3", c="1.5", steps=20, N=20, extra='sampler = "normal"\n')
    sim = simulate(sc, ControlPolicy.none().with_jump(0.5, 1.0), seed=2)
    assert reward_naive(sim).total == pytest.approx(reward_explicit(sim).total, abs=1e-12)


def test_naive_differs_when_cost_varies_along_jump():
    sc = line_scenario(c="x", g="0", steps=10, N=1)
    sim = simulate(sc, ControlPolicy.none().with_jump(0.5, 2.0))
    assert reward_naive(sim).total == pytest.approx(0.0, abs=1e-12)
    assert reward_explicit(sim).total == pytest.approx(-2.0, abs=1e-12)


def test_splitting_a_jump():
    sc = line_scenario(b="0.3", sigma="0.2", c="1 + x", g="x", steps=200, N=20, extra='sampler = "normal"\n')
    one = simulate(sc, ControlPolicy.none().with_jump(0.5, 1.0), seed=1)
    two = simulate(sc, ControlPolicy.none().with_jump(0.5, 0.5).with_jump(0.505, 0.5), seed=1)
    d_explicit = abs(reward_explicit(one).total - reward_explicit(two).total)
    d_naive = abs(reward_naive(one).total - reward_naive(two).total)
    assert d_explicit <= 0.05
    assert d_naive >= 0.2


def test_parametrisation_of_continuous_control():
    sc = line_scenario(b="-x", sigma="0.3", f="-x^2", g="x", c="1 + 0.5*x", steps=40, N=30,
                       moments='mx = "x"', extra='sampler = "normal"\n')
    sim = simulate(sc, ControlPolicy.from_expressions("1 - mx", 2.0, sc.coefficients), seed=3)
    assert reward_parametrisation(build_parametrisation(sim)) == pytest.approx(reward_continuous(sim), abs=1e-3)


def test_parametrisation_of_unit_jump_with_unit_cost():
    sc = line_scenario(g="0", c="1", steps=10, N=4, extra='sampler = "normal"\n')
    sim = simulate(sc, ControlPolicy.none().with_jump(0.5, 1.0))
    for cheap in (True, False):
        assert reward_parametrisation(build_parametrisation(sim, cheap_path=cheap)) == pytest.approx(-1.0, abs=1e-12)


TWO_CONTROLS = """
[dims]
d = 1
l = 2
[coefficients]
b = ["0"]
sigma = [["0"]]
gamma = [["1", "-1"]]
f = "0"
g = "0"
c = ["1 + x^2", "2 + x"]
[discretization]
steps = 10
particles = 5
[initial]
sampler = "normal"
"""


def test_optimised_second_layer_is_not_worse():
    sc = parse_scenario(TWO_CONTROLS)
    grid = np.linspace(0, 1, 11)
    flat = MonotoneControlPath(grid, np.zeros((11, 2)), np.zeros((11, 2)))
    jl, jr = np.zeros((11, 2)), np.zeros((11, 2))
    jr[5:] = [1.0, 1.5]
    jl[6:] = [1.0, 1.5]
    sim = simulate(sc, ControlPolicy.prescribed([MonotoneControlPath(grid, jl, jr)] + [flat] * 4))
    straight = reward_parametrisation(build_parametrisation(sim, eta_meas=10.0, cheap_path=False))
    cheap = reward_parametrisation(build_parametrisation(sim, eta_meas=10.0, cheap_path=True))
    assert cheap >= straight - 1e-12
    assert cheap > straight + 1e-3


def _warp(rng, nodes):
    # random increasing piecewise-linear map of [0, 1] with kinks at the given nodes
    knots = np.unique(np.concatenate([[0.0], nodes, [1.0]]))
    vals = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 2.0, len(knots) - 1))])
    vals /= vals[-1]
    return lambda v: np.interp(v, knots, vals)


def _retime(p, rng):
    f = p.first
    psi = _warp(rng, f.grid)
    first = replace(f, grid=psi(f.grid), hat_r=TimeChange(psi(f.grid), f.hat_r.values))
    second = []
    for sec in p.second:
        phi = _warp(rng, rng.uniform(0, 1, 5))
        w = phi(sec.grid)
        second.append(replace(sec, grid=w, s_bar=TimeChange(w, psi(sec.s_bar.values)),
                              s_fwd=CadlagPath(psi(sec.s_fwd.grid), phi(sec.s_fwd.left), phi(sec.s_fwd.right))))
    r_fwd = CadlagPath(p.r_fwd.grid, psi(p.r_fwd.left), psi(p.r_fwd.right))
    return replace(p, first=first, second=second, r_fwd=r_fwd)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_parametrisation_reward_invariant_under_time_changes(seed):
    rng = np.random.default_rng(seed)
    sc = line_scenario(b="-x", sigma="0.3", f="-x^2 + xi", g="x*mx", c="1 + 0.5*x*mx", steps=12, N=6,
                       moments='mx = "x"', extra=f'sampler = "normal"\nseed = {seed}\n')
    sim = simulate(sc, ControlPolicy.from_expressions("1", 1.0, sc.coefficients).with_jump(0.5, 1.0), seed=seed)
    p = build_parametrisation(sim, M=8)
    assert reward_parametrisation(_retime(p, rng)) == pytest.approx(reward_parametrisation(p), abs=1e-8)
