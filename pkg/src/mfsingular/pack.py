"""Curated scenario families run end to end, each returning a table of rows and a pass flag."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.integrate import quad

from .jump_cost import (PathwiseJumpQuery, distributional_jump_cost, is_reachable, measure_jump_cost,
                        pathwise_jump_cost, pathwise_jump_cost_oracle, schedule_enumeration_oracle)
from .measures import EmpiricalMeasure
from .model import Coefficients, parse_scenario
from .paths import MonotoneControlPath
from .simulate import ControlPolicy, simulate


@dataclass
class PackResult:
    name: str
    rows: list
    ok: bool
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0

    def record(self):
        return {"name": self.name, "ok": self.ok, "summary": self.summary, "seconds": self.seconds,
                "rows": self.rows}


def scenario_file(name):
    """Path of a bundled scenario (``name`` without the ``.cfg`` suffix)."""
    return resources.files("mfsingular").joinpath("scenarios", f"{name}.cfg")


def bundled_scenario(name):
    return parse_scenario(scenario_file(name).read_text())


def bundled_names():
    return sorted(p.name[:-4] for p in resources.files("mfsingular").joinpath("scenarios").iterdir()
                  if p.name.endswith(".cfg"))


def scenario_policy(scen):
    """Policy described by a scenario's ``[policy]`` section (rate expressions, cap, jumps)."""
    sec = scen.extra.get("policy", {})
    co = scen.coefficients
    if "rate" in sec:
        rate = sec["rate"]
        pol = ControlPolicy.from_expressions(rate if isinstance(rate, list) else [rate],
                                             float(sec.get("K", 1.0)), co)
    else:
        pol = ControlPolicy.none()
    for tj, size in sec.get("jumps", []):
        pol = pol.with_jump(float(tj), np.full(co.l, float(size)))
    return pol


# --------------------------------------------------------------------------
# 1-D reduction: with one control component the monotone path is unique

def one_d_instances(n=20, seed=0):
    rng = np.random.default_rng([seed, 1])
    out = []
    for _ in range(n):
        a = [float(v) for v in rng.uniform(-0.4, 0.4, 4)]
        gamma = float(rng.uniform(-1.5, 1.5))
        src = f"1.5 + {a[0]!r}*x + {a[1]!r}*xi + {a[2]!r}*tanh(x) + {a[3]!r}*x*xi"
        co = Coefficients(1, 1, 1, b=["0"], sigma=[["0"]], gamma=[[repr(gamma)]], f="0", g="0", c=[src])
        x0 = float(rng.normal())
        z0 = float(rng.uniform(0, 1))
        z1 = z0 + float(rng.uniform(0.2, 2.0))
        out.append((co, src, gamma, x0, z0, z1))
    return out


def one_d_quadrature(co, gamma, x0, z0, z1):
    """Reference integral of ``c(x0 + gamma (z - z0), z) dz`` by adaptive quadrature."""
    def integrand(z):
        x = np.array([x0 + gamma * (z - z0)])
        return float(co.eval_c(0.0, {}, x, np.array([z]))[0])
    val, _ = quad(integrand, z0, z1, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


def family_one_d(seed=0, n=20, Ms=(64, 128)):
    rows = []
    tols = {64: 1e-4, 128: 2.5e-5}
    ok = True
    for k, (co, src, gamma, x0, z0, z1) in enumerate(one_d_instances(n, seed)):
        ref = one_d_quadrature(co, gamma, x0, z0, z1)
        row = {"instance": k, "c": src, "gamma": gamma, "reference": ref}
        for M in Ms:
            v = pathwise_jump_cost(PathwiseJumpQuery(0.0, [x0], [z0], [z1]), co, M=M).value
            rel = abs(v - ref) / max(abs(ref), 1e-300)
            row[f"M{M}"] = v
            row[f"rel{M}"] = rel
            ok &= rel <= tols.get(M, np.inf)
        rows.append(row)
    worst = {f"max_rel{M}": max(r[f"rel{M}"] for r in rows) for M in Ms}
    return PackResult("1d-reduction", rows, bool(ok), worst)


# --------------------------------------------------------------------------
# two-component instances against the staircase lattice oracle

def exact_form_instances(n=6, seed=0):
    """``c_j = x gamma_j + alpha xi_{1-j}``: the cost is the exact differential of
    ``x^2 / 2 + alpha xi_0 xi_1``, so every path costs the potential difference."""
    rng = np.random.default_rng([seed, 2])
    out = []
    for _ in range(n):
        g = [float(v) for v in rng.uniform(-1, 1, 2)]
        alpha = float(rng.uniform(-1, 1))
        co = Coefficients(1, 2, 1, b=["0"], sigma=[["0"]], gamma=[[repr(g[0]), repr(g[1])]], f="0", g="0",
                          c=[f"x*{g[0]!r} + {alpha!r}*xi[1]", f"x*{g[1]!r} + {alpha!r}*xi[0]"])
        x0 = float(rng.normal())
        z0 = rng.uniform(0, 1, 2)
        z1 = z0 + rng.uniform(0.1, 1.5, 2)
        x1 = x0 + float(np.dot(g, z1 - z0))
        pot = 0.5 * (x1 ** 2 - x0 ** 2) + alpha * (z1[0] * z1[1] - z0[0] * z0[1])
        out.append(("exact-1-form", co, PathwiseJumpQuery(0.0, [x0], z0, z1), pot))
    return out


def structured_instances(n=6, seed=0):
    """``c = (a + b xi_1, a' + b' xi_0)``, ``gamma = 0``: the best order of moves depends on signs."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for _ in range(n):
        a, b, a2, b2 = (float(v) for v in rng.uniform(-1, 1, 4))
        co = Coefficients(1, 2, 1, b=["0"], sigma=[["0"]], gamma=[["0", "0"]], f="0", g="0",
                          c=[f"{1 + a!r} + {b!r}*xi[1]", f"{1 + a2!r} + {b2!r}*xi[0]"])
        z0 = rng.uniform(0, 1, 2)
        z1 = z0 + rng.uniform(0.1, 1.5, 2)
        out.append(("structured", co, PathwiseJumpQuery(0.0, [0.0], z0, z1), None))
    return out


def _quadrature_slack(co, q, M):
    # midpoint error bound on M steps of a path with bounded cost gradient, from a finite-difference sample
    delta = q.xi_new - q.xi
    h = float(np.abs(delta).sum()) / M
    pts = q.xi + np.random.default_rng(0).random((64, 1)) * delta
    gam = co.eval_gamma(q.t)
    grad = 0.0
    for e in np.eye(len(delta)):
        xs = q.x + (pts - q.xi) @ gam.T
        c1 = co.eval_c(q.t, {}, xs + 1e-6 * (gam @ e), pts + 1e-6 * e)
        c0 = co.eval_c(q.t, {}, xs, pts)
        grad = max(grad, float(np.abs((c1 - c0) / 1e-6).max()))
    return 1e-9 + h * float(np.abs(delta).sum()) * grad


def family_exact_form(seed=0, grid=8, M=64, n=6, include_bundled=True):
    rows = []
    ok = True
    cases = exact_form_instances(n, seed) + structured_instances(n, seed)
    if include_bundled:
        sc = bundled_scenario("pathwise_l2")
        qd = sc.extra["query"]
        cases.append(("bundled", sc.coefficients,
                      PathwiseJumpQuery(qd["t"], qd["x"], qd["xi"], qd["xi_new"]), None))
    for k, (kind, co, q, pot) in enumerate(cases):
        v = pathwise_jump_cost(q, co, M=M).value
        o = pathwise_jump_cost_oracle(q, co, grid_size=grid)
        slack = _quadrature_slack(co, q, M)
        good = (v <= o + 1e-9) and (v >= o - slack)
        row = {"instance": k, "kind": kind, "optimizer": v, "oracle": o, "slack": slack}
        if pot is not None:
            row["potential"] = pot
            row["potential_gap"] = abs(v - pot)
            good &= abs(v - pot) <= 1e-6
        row["ok"] = bool(good)
        ok &= good
        rows.append(row)
    return PackResult("exact-1-form", rows, bool(ok), {"instances": len(rows)})


# --------------------------------------------------------------------------
# mean-field ordering: the joint schedule matters

def ordering_instances(n=10, seed=0):
    """Two particles, one component, cost depending on the mean control level."""
    rng = np.random.default_rng([seed, 4])
    out = []
    for _ in range(n):
        cf = [float(v) for v in rng.uniform(-1, 1, 4)]
        g = float(rng.uniform(-1, 1))
        co = Coefficients(1, 1, 1, b=["0"], sigma=[["0"]], gamma=[[repr(g)]], f="0", g="0",
                          c=[f"{1 + cf[0]!r} + {cf[1]!r}*m1 + {cf[2]!r}*xi + {cf[3]!r}*x*m1"],
                          moments={"m1": "xi"})
        x0 = rng.normal(size=(2, 1))
        z0 = rng.uniform(0, 1, (2, 1))
        dz = rng.uniform(0.2, 1.5, (2, 1))
        before = EmpiricalMeasure.from_xy(x0, z0)
        after = EmpiricalMeasure.from_xy(x0 + dz @ co.eval_gamma(0.0).T, z0 + dz)
        out.append((co, before, after))
    return out


def _brute_force_reachable(t, m, m_new, co, tol=1e-9):
    g = co.eval_gamma(float(t))
    for perm in itertools.permutations(range(m.N)):
        dz = m_new.xi[list(perm)] - m.xi
        dx = m_new.x[list(perm)] - m.x - dz @ g.T
        if np.all(dz >= -tol) and np.all(np.abs(dx) <= tol):
            return True
    return False


def _brute_force_coupling(t, m, m_new, co, **kw):
    best = None
    for perm in itertools.permutations(range(m.N)):
        target = m_new.permuted(perm)
        if not _brute_force_reachable(t, m, target, co) or np.any(target.xi < m.xi - 1e-9):
            continue
        dz = target.xi - m.xi
        if np.any(np.abs(target.x - m.x - dz @ co.eval_gamma(t).T) > 1e-9):
            continue
        v = distributional_jump_cost(t, m, target, co, **kw).value
        if best is None or v < best[0] - 1e-12:
            best = (v, perm)
    return best


def coupling_instances(n=6, seed=0, N=3):
    rng = np.random.default_rng([seed, 5])
    out = []
    for _ in range(n):
        cf = [float(v) for v in rng.uniform(-0.5, 0.5, 3)]
        co = Coefficients(1, 1, 1, b=["0"], sigma=[["0"]], gamma=[["0.5"]], f="0", g="0",
                          c=[f"{1 + cf[0]!r} + {cf[1]!r}*m1 + {cf[2]!r}*x"], moments={"m1": "xi"})
        x0 = rng.normal(size=(N, 1))
        z0 = rng.uniform(0, 1, (N, 1))
        dz = rng.uniform(0.1, 1.0, (N, 1))
        perm = rng.permutation(N)
        before = EmpiricalMeasure.from_xy(x0, z0)
        after = EmpiricalMeasure.from_xy((x0 + 0.5 * dz)[perm], (z0 + dz)[perm])
        out.append((co, before, after))
    return out


def reachability_instances(n=50, seed=0):
    rng = np.random.default_rng([seed, 6])
    co = Coefficients(1, 1, 1, b=["0"], sigma=[["0"]], gamma=[["1"]], f="0", g="0", c=["1"])
    out = []
    for _ in range(n):
        N = int(rng.integers(2, 5))
        # small integer lattice makes coincidences and near misses common
        z0 = rng.integers(0, 3, (N, 1)).astype(float)
        x0 = rng.integers(0, 3, (N, 1)).astype(float)
        dz = rng.integers(0, 3, (N, 1)).astype(float)
        x1 = x0 + dz
        if rng.random() < 0.5:
            x1[rng.integers(N)] += rng.choice([-1.0, 1.0])
        perm = rng.permutation(N)
        out.append((co, EmpiricalMeasure.from_xy(x0, z0), EmpiricalMeasure.from_xy(x1[perm], (z0 + dz)[perm])))
    return out


def family_ordering(seed=0, n=10, M=4, steps=4):
    rows = []
    ok = True
    sc = bundled_scenario("ordering")
    qd = sc.extra["query"]
    before = EmpiricalMeasure(np.asarray(qd["before"], float), sc.coefficients.d, sc.coefficients.l)
    after = EmpiricalMeasure(np.asarray(qd["after"], float), sc.coefficients.d, sc.coefficients.l)
    cases = [("bundled", sc.coefficients, before, after)] + [("random", *c) for c in ordering_instances(n, seed)]
    for k, (kind, co, b, a) in enumerate(cases):
        r = distributional_jump_cost(float(qd["t"]) if kind == "bundled" else 0.0, b, a, co, M=M,
                                     lambda_steps=steps)
        o = schedule_enumeration_oracle(0.0, b, a, co, steps)
        gap = abs(r.value - o)
        rows.append({"instance": k, "kind": kind, "schedule": r.value, "enumeration": o, "gap": gap,
                     "simultaneous": r.diagnostics["straight_value"], "route": r.diagnostics["route"],
                     "ok": gap <= 1e-6})
        ok &= gap <= 1e-6
    kw = {"M": 8, "lambda_steps": 4}
    for k, (co, b, a) in enumerate(coupling_instances(4, seed)):
        r = measure_jump_cost(0.0, b, a, co, **kw)
        bf = _brute_force_coupling(0.0, b, a, co, **kw)
        good = abs(r.value - bf[0]) <= 1e-12
        rows.append({"instance": k, "kind": "coupling", "search": r.value, "brute_force": bf[0], "ok": good})
        ok &= good
    agree = 0
    insts = reachability_instances(50, seed)
    for co, b, a in insts:
        agree += is_reachable(0.0, b, a, co) == _brute_force_reachable(0.0, b, a, co)
    rows.append({"kind": "reachability", "instances": len(insts), "agree": agree, "ok": agree == len(insts)})
    ok &= agree == len(insts)
    return PackResult("ordering", rows, bool(ok), {"cases": len(rows)})


# --------------------------------------------------------------------------
# chattering: naive charging versus interpolated costs, and the bounded-velocity chain

def jump_source(scen, seed, jumps):
    """Prescribed control with atomic jumps ``[(time, size), ...]`` in every component."""
    co = scen.coefficients
    grid = np.linspace(scen.t0, scen.T, scen.disc.steps + 1)
    left = np.zeros((len(grid), co.l))
    right = np.zeros((len(grid), co.l))
    dt = (scen.T - scen.t0) / scen.disc.steps
    for tj, size in jumps:
        k = int(np.rint((tj - scen.t0) / dt))
        right[k:] += size
        left[k + 1:] += size
    path = MonotoneControlPath(grid, left, right)
    return simulate(scen, ControlPolicy.prescribed([path]), seed)


def approximation_chain(scen, seed, deltas, jumps=((0.5, 1.0),), trunc=10.0):
    """Rewards of bounded-velocity approximations of a jump control, on the source's noise."""
    from .parametrise import ApproximationParams, bounded_velocity_approximation, build_parametrisation
    from .parametrise import lipschitz_approximation
    from .reward import reward_continuous, reward_explicit

    src = jump_source(scen, seed, jumps)
    target = reward_explicit(src).total
    p = build_parametrisation(src)
    rows = []
    for dl in deltas:
        q = lipschitz_approximation(p, ApproximationParams(trunc, dl / 2, dl))
        bv = bounded_velocity_approximation(q, dl / 2, dl)
        sim = simulate(scen, bv.policy, seed)
        v = reward_continuous(sim)
        rows.append({"delta": float(dl), "reward": v, "gap": abs(v - target), "K": bv.K})
    return target, rows


def chain_ok(target, rows):
    gaps = [r["gap"] for r in rows]
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    final = gaps[-1] <= max(0.05 * abs(target), 0.01)
    return decreasing and final


def family_chattering(seed=0, scenario="chattering"):
    from .reward import reward_explicit, reward_naive

    scen = bundled_scenario(scenario)
    pol = scen.extra.get("policy", {})
    jumps = [tuple(map(float, j)) for j in pol.get("jumps", [[0.5, 1.0]])]
    dt = (scen.T - scen.t0) / scen.disc.steps
    rows = []
    # one jump, and the same total split over two consecutive stamps
    tj, size = jumps[0]
    variants = {"single": [(tj, size)], "split": [(tj, size / 2), (tj + dt, size / 2)]}
    table = {}
    for name, js in variants.items():
        src = jump_source(scen, seed, js)
        ex = reward_explicit(src)
        nv = reward_naive(src)
        table[name] = (ex, nv)
        rows.append({"variant": name, "explicit": ex.total, "naive": nv.total,
                     "explicit_jump_cost": ex.cost_first_kind + ex.cost_second_kind,
                     "naive_jump_cost": nv.cost_first_kind, "gap": nv.total - ex.total})
    target, chain = approximation_chain(scen, seed, pol.get("deltas", [0.2, 0.1, 0.05, 0.025]), jumps=[(tj, size)])
    for r in chain:
        rows.append({"variant": f"bounded-velocity delta={r['delta']:g}", "explicit": r["reward"],
                     "gap": r["gap"], "K": r["K"]})
    ok = chain_ok(target, chain)
    return PackResult("chattering", rows, bool(ok),
                      {"explicit": target, "naive": table["single"][1].total,
                       "final_gap": chain[-1]["gap"] if chain else None})


# --------------------------------------------------------------------------
# min(xi, 1) value family

def family_min_xi(seed=0, noisy_seeds=0):
    from .value import PolicyClass, dpp_check, vk_monotone_sweep

    scen = bundled_scenario("min_xi")
    run = scen.extra.get("run", {})
    Ks = run.get("K", [0.25, 0.5, 1.0, 2.0, 4.0])
    budget = int(run.get("budget", 64))
    ests, viol = vk_monotone_sweep(scen, Ks, budget=budget, seed=seed)
    rows = []
    ok = not viol
    for e in ests:
        expect = min(e.K, 1.0)
        good = abs(e.value - expect) <= 1e-3
        ok &= good
        rows.append({"kind": "sweep", "K": e.K, "value": e.value, "expected": expect, "ok": good})
    s = float(run.get("split", 0.5))
    for K in (0.5, 2.0):
        rep = dpp_check(scen, s, K, budget=budget, seed=seed, jump_candidates=[(0.25, 0.5)])
        good = abs(rep.gap) <= 1e-6
        ok &= good
        rows.append({"kind": "dpp", "K": K, "lhs": rep.lhs, "rhs": rep.rhs, "gap": rep.gap, "ok": good})
    if noisy_seeds:
        noisy = bundled_scenario("min_xi_noisy")
        nrun = noisy.extra.get("run", {})
        pc = PolicyClass(pieces=int(nrun.get("pieces", 1)))
        within = 0
        for sd in range(noisy_seeds):
            rep = dpp_check(noisy, float(nrun.get("split", 0.5)), 1.0, pc, budget=int(nrun.get("budget", 64)),
                            seed=sd)
            good = abs(rep.gap) <= 2 * rep.band
            within += good
            rows.append({"kind": "dpp-noisy", "seed": sd, "lhs": rep.lhs, "rhs": rep.rhs, "gap": rep.gap,
                         "band": rep.band, "ok": bool(good)})
        ok &= within >= int(np.ceil(0.9 * noisy_seeds))
    return PackResult("min-xi", rows, bool(ok), {"violations": viol})


# --------------------------------------------------------------------------
# QVI boundary family

def family_qvi(seed=0):
    from .qvi import CylinderFunctional, key_lemma_check, qvi_residual, richardson_slope, first_order_prediction

    scen = bundled_scenario("qvi_boundary")
    co = scen.coefficients
    fn = scen.extra["functional"]
    x, xi = scen.initial_ensemble()
    m = EmpiricalMeasure.from_xy(x, xi)
    box = np.asarray(fn["box"], float)
    n_samples = int(fn.get("samples", 100))
    rows = []
    ok = True
    u = CylinderFunctional(fn["psi"], fn["F"], co.d, co.l)
    for t in fn.get("times", [scen.t0]):
        r = qvi_residual(u, float(t), m, co, T=scen.T, box=box, n_samples=n_samples, seed=seed)
        good = abs(r.residual) <= 1e-9
        ok &= good
        rows.append({"case": "boundary", "t": float(t), "hjb": r.hjb_part, "intervention": r.intervention_part,
                     "residual": r.residual, "ok": bool(good)})
    kw = {"M": 8, "lambda_steps": 2}
    sup = co.replace(c=["2"])
    rep = key_lemma_check(u, scen.t0, m, sup, trials=6, seed=seed, cost_kw=kw)
    ok &= not rep.violation_found
    rows.append({"case": "supersolution c=2", "direction": rep.direction, "margin": rep.margin,
                 "violation": rep.violation_found, "ok": not rep.violation_found})
    uq = CylinderFunctional(["xi^2"], "a0", co.d, co.l)
    rep = key_lemma_check(uq, scen.t0, m, co, trials=6, seed=seed, cost_kw=kw)
    ok &= rep.violation_found
    rows.append({"case": "violator xi^2", "direction": rep.direction, "margin": rep.margin,
                 "violation": rep.violation_found, "ok": rep.violation_found})
    un = CylinderFunctional(["x*xi", "xi"], "a0 + a1^2", co.d, co.l)
    subset = np.arange(m.N)
    v = np.array([1.0])
    slope = richardson_slope(un, scen.t0, m, co, subset, v, 1e-3)
    pred = first_order_prediction(un, scen.t0, m, co, subset, v)
    rel = abs(slope - pred) / max(abs(pred), 1e-300)
    ok &= rel <= 0.01
    rows.append({"case": "first-order slope", "slope": slope, "prediction": pred, "rel": rel, "ok": rel <= 0.01})
    return PackResult("qvi-boundary", rows, bool(ok), {})


FAMILIES = {
    "1d-reduction": family_one_d,
    "exact-1-form": family_exact_form,
    "ordering": family_ordering,
    "chattering": family_chattering,
    "min-xi": family_min_xi,
    "qvi-boundary": family_qvi,
}


def run_family(name, seed=0):
    if name not in FAMILIES:
        raise ValueError(f"unknown pack {name!r}; choose from {', '.join(FAMILIES)} or 'all'")
    t = time.perf_counter()
    res = FAMILIES[name](seed=seed)
    res.seconds = time.perf_counter() - t
    return res
