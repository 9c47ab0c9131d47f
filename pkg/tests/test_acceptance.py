"""End-to-end acceptance checks. Each test prints one PASS/FAIL line before asserting."""
import time

import numpy as np
import pytest

from mfsingular.jump_cost import (distributional_jump_cost, is_reachable, measure_jump_cost,
                                  schedule_enumeration_oracle)
from mfsingular.measures import EmpiricalMeasure
from mfsingular.pack import (_brute_force_coupling, _brute_force_reachable, approximation_chain, bundled_scenario,
                             chain_ok, coupling_instances, family_exact_form, family_one_d, ordering_instances,
                             reachability_instances)
from mfsingular.parametrise import build_parametrisation, layer_consistency_errors, roundtrip_error
from mfsingular.qvi import (CylinderFunctional, first_order_prediction, ito_check, key_lemma_check,
                            richardson_slope)
from mfsingular.simulate import simulate
from mfsingular.value import PolicyClass, dpp_check, vk_monotone_sweep

from conftest import line_scenario, random_jump_simulation


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, seconds=None):
        tail = f" ({seconds:.2f}s)" if seconds is not None else ""
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}{tail}")
        assert ok, detail
    return emit


def test_01_one_dimensional_reduction(report):
    t = time.perf_counter()
    res = family_one_d(seed=0, n=20)
    dt = time.perf_counter() - t
    s = res.summary
    ok = res.ok and s["max_rel64"] <= 1e-4 and s["max_rel128"] <= 2.5e-5 and dt < 1.0
    report(1, ok, f"20 instances, max rel err M64 {s['max_rel64']:.2e}, M128 {s['max_rel128']:.2e}", dt)


def test_02_lattice_oracle_and_exact_forms(report):
    t = time.perf_counter()
    res = family_exact_form(seed=0, grid=8)
    dt = time.perf_counter() - t
    worst_pot = max(r.get("potential_gap", 0.0) for r in res.rows)
    above = max(r["optimizer"] - r["oracle"] for r in res.rows)
    ok = res.ok and dt < 30.0
    report(2, ok, f"{len(res.rows)} l=2 instances, max optimizer-oracle {above:.2e}, "
                  f"max potential gap {worst_pot:.2e}", dt)


def test_03_schedule_enumeration(report):
    t = time.perf_counter()
    gaps = []
    for co, before, after in ordering_instances(10, seed=0):
        r = distributional_jump_cost(0.0, before, after, co, M=4, lambda_steps=4)
        gaps.append(abs(r.value - schedule_enumeration_oracle(0.0, before, after, co, 4)))
    dt = time.perf_counter() - t
    report(3, max(gaps) <= 1e-6, f"10 instances, N=2, 4-step schedules, max gap {max(gaps):.2e}", dt)


def test_04_coupling_brute_force_and_reachability(report):
    t = time.perf_counter()
    kw = {"M": 8, "lambda_steps": 4}
    mismatches = 0
    count = 0
    for N in (2, 3, 4):
        for co, before, after in coupling_instances(3, seed=N, N=N):
            v = measure_jump_cost(0.0, before, after, co, **kw).value
            mismatches += v != _brute_force_coupling(0.0, before, after, co, **kw)[0]
            count += 1
    insts = reachability_instances(50, seed=0)
    agree = sum(is_reachable(0.0, b, a, co) == _brute_force_reachable(0.0, b, a, co) for co, b, a in insts)
    dt = time.perf_counter() - t
    ok = mismatches == 0 and agree == len(insts)
    report(4, ok, f"coupling {count - mismatches}/{count} exact (N<=4), reachability {agree}/{len(insts)}", dt)


def test_05_parametrisation_roundtrip(report):
    t = time.perf_counter()
    worst_rt = worst_cons = 0.0
    for seed in range(10):
        sim = random_jump_simulation(seed)
        p = build_parametrisation(sim)
        worst_rt = max(worst_rt, roundtrip_error(p, sim))
        worst_cons = max(worst_cons, max(layer_consistency_errors(p, sim)))
    dt = time.perf_counter() - t
    ok = worst_rt <= 1e-9 and worst_cons <= 1e-9
    report(5, ok, f"10 scenarios, roundtrip {worst_rt:.1e}, consistency {worst_cons:.1e}", dt)


def test_06_bounded_velocity_chain(report):
    t = time.perf_counter()
    scen = bundled_scenario("one_jump")
    assert (scen.disc.particles, scen.disc.steps) == (200, 400)
    target, rows = approximation_chain(scen, 0, [0.2, 0.1, 0.05, 0.025])
    dt = time.perf_counter() - t
    gaps = ", ".join(f"{r['gap']:.4f}" for r in rows)
    ok = chain_ok(target, rows) and dt < 120.0
    report(6, ok, f"explicit {target:.4f}, gaps {gaps}", dt)


def test_07_dynamic_programming(report):
    t = time.perf_counter()
    det = bundled_scenario("min_xi")
    det_gaps = [abs(dpp_check(det, 0.5, K, budget=64, seed=0).gap) for K in (0.5, 2.0)]
    det_gaps.append(abs(dpp_check(det, 0.5, 2.0, budget=64, seed=0, jump_candidates=[(0.25, 0.5)]).gap))
    noisy = bundled_scenario("min_xi_noisy")
    run = noisy.extra.get("run", {})
    pc = PolicyClass(pieces=int(run.get("pieces", 1)))
    within = 0
    for sd in range(10):
        rep = dpp_check(noisy, float(run.get("split", 0.5)), 1.0, pc, budget=int(run.get("budget", 64)), seed=sd)
        within += abs(rep.gap) <= 2 * rep.band
    dt = time.perf_counter() - t
    ok = max(det_gaps) <= 1e-6 and within >= 9 and dt < 300.0
    report(7, ok, f"deterministic max gap {max(det_gaps):.1e}, noisy within 2 bands on {within}/10 seeds", dt)


def test_08_value_monotone_in_cap(report):
    t = time.perf_counter()
    Ks = [0.25, 0.5, 1.0, 2.0, 4.0]
    ests, viol = vk_monotone_sweep(bundled_scenario("min_xi"), Ks, budget=64, seed=0)
    errs = [abs(e.value - min(K, 1.0)) for e, K in zip(ests, Ks)]
    smooth_viol = 0
    for seed, (c, g) in enumerate([("0.3 + 0.1*x^2", "tanh(x) + 0.5*min(xi, 1)"),
                                   ("0.2", "x - 0.5*x^2 + 0.3*min(xi, 2)"),
                                   ("0.1 + 0.2*xi", "tanh(2*x) + xi - 0.3*xi^2")]):
        sc = line_scenario(b="-0.5*x", sigma="0.3", f="-0.2*x^2", g=g, c=c, steps=10, N=200,
                           extra='sampler = "normal"\nstd = [0.3, 0.0]\n')
        _, v = vk_monotone_sweep(sc, [0.25, 0.5, 1.0, 2.0], PolicyClass(("1", "x"), 1), budget=64, seed=seed)
        smooth_viol += len(v)
    dt = time.perf_counter() - t
    ok = not viol and max(errs) <= 1e-3 and smooth_viol == 0
    values = ", ".join(f"{e.value:.4f}" for e in ests)
    report(8, ok, f"sweep {{{values}}}, max err {max(errs):.1e}, smooth-scenario violations {smooth_viol}", dt)


def test_09_generator_ito(report):
    t = time.perf_counter()
    functionals = {"int x": ("x", "a0"), "int x^2": ("x^2", "a0"), "(int x)^2": ("x", "a0^2")}
    ok = True
    ratios = []
    for psi, F in functionals.values():
        u = CylinderFunctional(psi, F, 1, 1)
        bounds = []
        for steps in (20, 40):
            sc = line_scenario(b="1 - x + 0.5*mx", sigma="0.3", steps=steps, N=1000, moments='mx = "x"',
                               extra='sampler = "normal"\nmean = [1.0, 0.0]\n')
            r = ito_check(u, simulate(sc, seed=2))
            ok &= r.error <= r.bound + 3 * r.band
            bounds.append(r.bound)
        # a linear functional has no Euler remainder: the bound is zero at every step size
        if bounds[0] == 0:
            ok &= bounds[1] == 0
            ratios.append("exact")
        else:
            ok &= abs(bounds[1] / bounds[0] - 0.5) <= 0.05
            ratios.append(f"{bounds[1] / bounds[0]:.3f}")
    dt = time.perf_counter() - t
    report(9, bool(ok), "bound ratios under dt halving " + ", ".join(ratios), dt)


def test_10_key_lemma_first_order(report):
    t = time.perf_counter()
    scen = bundled_scenario("qvi_boundary")
    co = scen.coefficients
    x, xi = scen.initial_ensemble()
    m = EmpiricalMeasure.from_xy(x, xi)
    worst = 0.0
    rng = np.random.default_rng(7)
    for psi, F in ((["x*xi", "xi"], "a0 + a1^2"), (["x^2"], "exp(0.3*a0)"), (["xi", "x"], "a0*a1")):
        u = CylinderFunctional(psi, F, co.d, co.l)
        subset = np.sort(rng.choice(m.N, size=max(1, m.N // 2), replace=False))
        v = np.array([1.0])
        slope = richardson_slope(u, scen.t0, m, co, subset, v, 1e-3)
        pred = first_order_prediction(u, scen.t0, m, co, subset, v)
        worst = max(worst, abs(slope - pred) / max(abs(pred), 1e-300))
    kw = {"M": 8, "lambda_steps": 2}
    violators = [CylinderFunctional(["xi^2"], "a0", co.d, co.l), CylinderFunctional(["xi"], "3*a0", co.d, co.l)]
    found = sum(key_lemma_check(u, scen.t0, m, co, trials=6, seed=0, cost_kw=kw).violation_found
                for u in violators)
    dt = time.perf_counter() - t
    ok = worst <= 0.01 and found == len(violators)
    report(10, ok, f"max relative slope error {worst:.1e}, violations certified {found}/{len(violators)}", dt)
