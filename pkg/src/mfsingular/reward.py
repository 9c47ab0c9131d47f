"""Reward functionals: continuous controls, explicit jump-cost representation, parametrisations."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .jump_cost import PathwiseJumpQuery, distributional_jump_cost, pathwise_jump_cost
from .measures import EmpiricalMeasure, classify_jump_times, default_eta_meas


class RewardError(ValueError):
    pass


class RewardNumericalError(RewardError, ArithmeticError):
    pass


@dataclass
class RewardBreakdown:
    running: float
    terminal: float
    cost_continuous: float
    cost_first_kind: float = 0.0
    cost_second_kind: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def total(self):
        return (self.running + self.terminal - self.cost_continuous
                - self.cost_first_kind - self.cost_second_kind)

    def as_dict(self):
        out = asdict(self)
        out.pop("details")
        out["total"] = self.total
        return out


def default_eta_path(sim):
    return 1e-9 * max(float(np.ptp(sim.xi_right)) if sim.xi_right.size else 0.0, 1.0)


def _segment_terms(sim):
    """Per-particle running reward and continuous cost on the open intervals between stamps.

    Midpoint rule in time, state, control and measure.
    """
    co = sim.coefficients
    g = sim.grid
    tm = 0.5 * (g[1:] + g[:-1])
    dt = np.diff(g)
    Xm = 0.5 * (sim.X_right[:-1] + sim.X_left[1:])          # (K, N, d)
    Zm = 0.5 * (sim.xi_right[:-1] + sim.xi_left[1:])
    dZ = sim.xi_left[1:] - sim.xi_right[:-1]
    mom = co.moments(Xm, Zm)
    f = co.eval_f(tm[:, None], mom, Xm, Zm)                  # (K, N)
    c = co.eval_c(tm[:, None], mom, Xm, Zm)                  # (K, N, l)
    running = (f * dt[:, None]).sum(axis=0)
    cost = (c * dZ).sum(axis=(0, 2))
    return running, cost


def _terminal(sim):
    co = sim.coefficients
    X, Z = sim.X_right[-1], sim.xi_right[-1]
    return co.eval_g(co.moments(X, Z), X, Z)


def reward_continuous_breakdown(sim, eta_path=None):
    eta_path = default_eta_path(sim) if eta_path is None else eta_path
    mask = sim.jump_mask(eta_path)
    if mask.any():
        k, i = np.argwhere(mask)[0]
        raise RewardError(f"control jumps at stamp {k} (particle {i}); use reward_explicit for jumps")
    running, cost = _segment_terms(sim)
    return RewardBreakdown(float(running.mean()), float(_terminal(sim).mean()), float(cost.mean()))


def reward_continuous(sim, eta_path=None):
    """Ensemble-averaged reward of a control without jumps."""
    return reward_continuous_breakdown(sim, eta_path).total


def reward_explicit(sim, eta_meas=None, eta_path=None, M=64, lambda_steps=16, seed=0, restarts=2):
    """Reward with jumps charged by their minimal interpolation cost.

    Macroscopic jumps (ensemble W2 gap above ``eta_meas``) pay the
    distributional cost of the paired ensemble; other jumps pay each
    jumping particle's pathwise cost against the pre-jump measure, divided by N.
    """
    co = sim.coefficients
    flow = sim.flow()
    if eta_meas is None:
        eta_meas = default_eta_meas(sim.N, flow.xi_range())
    eta_path = default_eta_path(sim) if eta_path is None else eta_path
    running, cost = _segment_terms(sim)
    jd, _ = classify_jump_times(flow, eta_meas)
    jd = set(int(k) for k in jd)
    mask = sim.jump_mask(eta_path)
    first = second = 0.0
    per_stamp = {}
    for k in np.flatnonzero(mask.any(axis=1)):
        t = float(sim.grid[k])
        before = sim.measure(k, "left")
        try:
            if k in jd:
                res = distributional_jump_cost(t, before, sim.measure(k, "right"), co, M=M,
                                               lambda_steps=lambda_steps, seed=seed, restarts=restarts)
                second += res.value
                per_stamp[int(k)] = ("second", res.value)
            else:
                v = 0.0
                for i in np.flatnonzero(mask[k]):
                    q = PathwiseJumpQuery(t, sim.X_left[k, i], sim.xi_left[k, i], sim.xi_right[k, i], m=before)
                    v += pathwise_jump_cost(q, co, M=M, seed=seed).value
                first += v / sim.N
                per_stamp[int(k)] = ("first", v / sim.N)
        except Exception as err:
            kind = RewardNumericalError if isinstance(err, ArithmeticError) else RewardError
            raise kind(f"jump cost failed at stamp {k} (t={t:.6g}): {err}") from err
    return RewardBreakdown(float(running.mean()), float(_terminal(sim).mean()), float(cost.mean()),
                           first, second, details={"stamps": per_stamp, "eta_meas": eta_meas})


def reward_naive(sim, eta_path=None):
    """Reward charging each jump at the pre-jump state: ``c(u, m_u, X_{u-}, xi_{u-}) . d xi``."""
    co = sim.coefficients
    eta_path = default_eta_path(sim) if eta_path is None else eta_path
    running, cost = _segment_terms(sim)
    jump = 0.0
    for k in np.flatnonzero(sim.jump_mask(eta_path).any(axis=1)):
        mom = co.moments(sim.X_right[k], sim.xi_right[k])
        c = co.eval_c(float(sim.grid[k]), mom, sim.X_left[k], sim.xi_left[k])
        jump += float((c * (sim.xi_right[k] - sim.xi_left[k])).sum(axis=1).mean())
    return RewardBreakdown(float(running.mean()), float(_terminal(sim).mean()), float(cost.mean()),
                           jump, 0.0, details={"naive": True})


def reward_parametrisation(p, coeffs=None):
    """Reward of a two-layer parametrisation, composite midpoint rule on the second-layer grids.

    On stretches where the second-layer clock is flat (an opened jump) the
    first-layer measure is taken as its left limit, i.e. frozen before the jump.
    """
    co = coeffs or p.coefficients
    f1 = p.first
    d = p.d
    total = np.zeros(p.N)
    for i, sec in enumerate(p.second):
        u = sec.s_bar.values
        um = 0.5 * (u[1:] + u[:-1])
        tn = p.hat_r(u)
        tm = 0.5 * (tn[1:] + tn[:-1])
        dtime = np.diff(tn)
        Xm = 0.5 * (sec.X[1:] + sec.X[:-1])
        Zm = 0.5 * (sec.xi[1:] + sec.xi[:-1])
        dZ = np.diff(sec.xi, axis=0)
        ex, ez = f1.ensemble_at(um, side="left")
        mom = co.moments(ex, ez, keepdims=False)
        fv = co.eval_f(tm, mom, Xm, Zm)
        cv = co.eval_c(tm, mom, Xm, Zm)
        ex1, ez1 = f1.ensemble_at(np.array([1.0]))
        g = co.eval_g(co.moments(ex1[0], ez1[0]), sec.X[-1:, :d], sec.xi[-1:])
        total[i] = float((fv * dtime).sum() - (cv * dZ).sum() + g[0])
    return float(total.mean())
