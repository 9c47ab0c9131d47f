"""Two-layer parametrisations of simulated singular controls and their approximations.

First layer: a deterministic clock ``r`` (ensemble-wide) stretches every stamp
where the control jumps into an interval of length proportional to the jump's
ensemble L2 size.  Macroscopic jumps are interpolated on that interval, so the
first-layer measure flow is continuous up to single-particle jumps.

Second layer: for each particle a clock ``s`` driven by the arctan of the
path's l1 variation opens the particle's remaining jumps into intervals that
carry a monotone interpolating path.

All clocks are piecewise linear between nodes; between original stamps the
clock formulas are interpolated linearly, which keeps them strictly increasing
with the same lower slope bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jump_cost import PathwiseJumpQuery, distributional_jump_cost, pathwise_jump_cost
from .measures import EmpiricalMeasure, classify_jump_times, default_eta_meas, wasserstein2
from .paths import CadlagPath, MonotoneControlPath, TimeChange, right_continuous_inverse
from .simulate import ControlPolicy

HALF_PI = math.pi / 2


@dataclass
class FirstLayer:
    grid: np.ndarray       # (n,) first-layer time nodes in [0, 1]
    X_left: np.ndarray     # (n, N, d)
    X_right: np.ndarray
    xi_left: np.ndarray    # (n, N, l)
    xi_right: np.ndarray
    hat_r: TimeChange      # first-layer time -> original time

    @property
    def N(self):
        return self.X_left.shape[1]

    def ensemble_path(self):
        """All particles as one cadlag path with columns ``[X (N*d), xi (N*l)]``."""
        n, N, d = self.X_left.shape
        l = self.xi_left.shape[2]
        left = np.concatenate([self.X_left.reshape(n, N * d), self.xi_left.reshape(n, N * l)], axis=1)
        right = np.concatenate([self.X_right.reshape(n, N * d), self.xi_right.reshape(n, N * l)], axis=1)
        return CadlagPath(self.grid, left, right)

    def ensemble_at(self, u, side="right"):
        n, N, d = self.X_left.shape
        l = self.xi_left.shape[2]
        p = self.ensemble_path()
        vals = p(u) if side == "right" else p.left_limit(u)
        return vals[:, :N * d].reshape(-1, N, d), vals[:, N * d:].reshape(-1, N, l)

    def particle_path(self, i):
        return CadlagPath(self.grid, np.concatenate([self.X_left[:, i], self.xi_left[:, i]], axis=1),
                          np.concatenate([self.X_right[:, i], self.xi_right[:, i]], axis=1))


@dataclass
class SecondLayer:
    grid: np.ndarray       # (n_i,) second-layer time nodes in [0, 1]
    X: np.ndarray          # (n_i, d), continuous
    xi: np.ndarray         # (n_i, l), continuous and monotone
    s_bar: TimeChange      # second-layer time -> first-layer time
    s_fwd: CadlagPath      # first-layer time -> second-layer time (clock), on first-layer nodes

    def path(self):
        return CadlagPath.continuous(self.grid, np.concatenate([self.X, self.xi], axis=1))


@dataclass
class TwoLayerParametrisation:
    first: FirstLayer
    second: list
    r_fwd: CadlagPath       # original time -> first-layer time, on the source stamps
    t: float
    T: float
    d: int
    l: int
    coefficients: object = None
    provenance: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def hat_r(self):
        return self.first.hat_r

    @property
    def source_grid(self):
        return self.r_fwd.grid

    @property
    def N(self):
        return len(self.second)


@dataclass
class ApproximationParams:
    N_trunc: float
    eps: float
    delta: float

    def __post_init__(self):
        if not (self.N_trunc > 0 and self.eps > 0 and self.delta > 0):
            raise ValueError("approximation parameters must be positive")


def _l2(diff):
    # ensemble L2 norm of per-particle Euclidean displacements
    return np.sqrt(np.mean(np.sum(diff ** 2, axis=-1), axis=-1))


# --------------------------------------------------------------------------
# first layer

def build_first_layer(sim, eta_meas=None, schedules=None, cost_aware=False, lambda_steps=16, M=64,
                      seed=0):
    """First-layer clock and rescaled ensemble paths for a simulation result.

    ``schedules`` optionally maps stamp index -> :class:`~mfsingular.jump_cost.Schedule`
    used to interpolate that macroscopic jump; with ``cost_aware`` the
    schedules are computed by the distributional jump-cost optimizer.
    Returns ``(first_layer, r_fwd, jd)``.
    """
    co = sim.coefficients
    grid = sim.grid
    t, T = float(grid[0]), float(grid[-1])
    if not T > t:
        raise ValueError("degenerate horizon")
    pre = sim.xi_left[0]
    D = (T - t) + _l2(sim.xi_right[-1] - pre)
    r_left = ((grid - t) + _l2(sim.xi_left - pre)) / D
    r_right = ((grid - t) + _l2(sim.xi_right - pre)) / D
    r_right[-1] = 1.0
    r_left = np.minimum(r_left, r_right)
    flow = sim.flow()
    if eta_meas is None:
        eta_meas = default_eta_meas(sim.N, flow.xi_range())
    jd, _ = classify_jump_times(flow, eta_meas)
    jd_set = set(int(k) for k in jd)
    schedules = dict(schedules or {})

    us, tl, XL, XR, ZL, ZR = [], [], [], [], [], []

    def add(u, time, xl, xr, zl, zr):
        us.append(u)
        tl.append(time)
        XL.append(xl)
        XR.append(xr)
        ZL.append(zl)
        ZR.append(zr)

    lam = np.linspace(0.0, 1.0, lambda_steps + 1)
    for k, tk in enumerate(grid):
        xl, xr = sim.X_left[k], sim.X_right[k]
        zl, zr = sim.xi_left[k], sim.xi_right[k]
        if r_right[k] <= r_left[k]:
            add(r_left[k], tk, xl, xr, zl, zr)
            continue
        if k in jd_set:
            sched = schedules.get(k)
            if sched is None and cost_aware:
                res = distributional_jump_cost(tk, EmpiricalMeasure.from_xy(xl, zl),
                                               EmpiricalMeasure.from_xy(xr, zr), co, M=M,
                                               lambda_steps=lambda_steps, seed=seed)
                sched = res.schedule
            if sched is not None:
                P = sched.positions                                  # (N, S + 1, l)
                lam_k = np.linspace(0.0, 1.0, P.shape[1])
            else:
                P = zl[:, None, :] + lam[None, :, None] * (zr - zl)[:, None, :]
                lam_k = lam
            gamma = co.eval_gamma(tk)
            add(r_left[k], tk, xl, xl, zl, zl)
            for j in range(1, len(lam_k) - 1):
                z = P[:, j, :]
                x = xl + (z - zl) @ gamma.T
                u = r_left[k] + lam_k[j] * (r_right[k] - r_left[k])
                add(u, tk, x, x, z, z)
            add(r_right[k], tk, xr, xr, zr, zr)
        else:
            # single-particle jumps stay jumps in this layer: hold, then jump
            add(r_left[k], tk, xl, xl, zl, zl)
            add(r_right[k], tk, xl, xr, zl, zr)
    us = np.asarray(us)
    keep = np.concatenate([[True], np.diff(us) > 0])
    if not keep.all():
        raise ValueError("first-layer clock is not strictly increasing between stamps")
    first = FirstLayer(us, np.array(XL), np.array(XR), np.array(ZL), np.array(ZR), TimeChange(us, np.array(tl)))
    r_fwd = CadlagPath(grid, r_left, r_right)
    return first, r_fwd, jd


# --------------------------------------------------------------------------
# second layer

def _second_layer_particle(first, i, co, cheap_path, M, seed, eta_path):
    u = first.grid
    zl, zr = first.xi_left[:, i], first.xi_right[:, i]
    xl, xr = first.X_left[:, i], first.X_right[:, i]
    pre = zl[0]
    var_l = np.abs(zl - pre).sum(axis=1)   # monotone paths: variation = l1 increment
    var_r = np.abs(zr - pre).sum(axis=1)
    s_l = (u + np.arctan(var_l)) / (1 + HALF_PI)
    s_r = (u + np.arctan(var_r)) / (1 + HALF_PI)
    jumps = np.max(np.abs(zr - zl), axis=1) > eta_path
    s_r = np.where(jumps, s_r, s_l)
    ws, Xs, Zs, Us = [], [], [], []
    for n in range(len(u)):
        if not jumps[n]:
            ws.append(s_l[n])
            Xs.append(xr[n])
            Zs.append(zr[n])
            Us.append(u[n])
            continue
        tn = float(first.hat_r(u[n]))
        gamma = co.eval_gamma(tn)
        nodes = None
        if cheap_path:
            m = EmpiricalMeasure.from_xy(first.X_left[n], first.xi_left[n])
            q = PathwiseJumpQuery(tn, xl[n], zl[n], zr[n], m=m)
            nodes = pathwise_jump_cost(q, co, M=M, seed=seed).path
        if nodes is None:
            nodes = np.vstack([zl[n], zr[n]])
        lam = np.linspace(0.0, 1.0, len(nodes))
        for j, z in enumerate(nodes):
            ws.append(s_l[n] + lam[j] * (s_r[n] - s_l[n]))
            Xs.append(xl[n] + (z - zl[n]) @ gamma.T)
            Zs.append(z)
            Us.append(u[n])
    ws = np.asarray(ws)
    Us = np.asarray(Us)
    if ws[-1] < 1.0:
        ws = np.append(ws, 1.0)
        Xs.append(Xs[-1])
        Zs.append(Zs[-1])
        Us = np.append(Us, Us[-1])
    s_fwd = CadlagPath(u, s_l[:, None], s_r[:, None])
    return SecondLayer(ws, np.array(Xs), np.array(Zs), TimeChange(ws, Us), s_fwd)


def build_second_layer(first, r_fwd, sim, cheap_path=True, M=64, seed=0, eta_path=None):
    co = sim.coefficients
    if eta_path is None:
        eta_path = 1e-9 * max(float(np.ptp(sim.xi_right)) if sim.xi_right.size else 1.0, 1.0)
    second = [_second_layer_particle(first, i, co, cheap_path, M, seed, eta_path) for i in range(sim.N)]
    return TwoLayerParametrisation(first, second, r_fwd, float(sim.grid[0]), float(sim.grid[-1]),
                                   sim.d, sim.l, co, provenance=sim.config_hash)


def build_parametrisation(sim, eta_meas=None, cost_aware=False, cheap_path=True, lambda_steps=16, M=64,
                          seed=0, eta_path=None):
    first, r_fwd, jd = build_first_layer(sim, eta_meas, cost_aware=cost_aware, lambda_steps=lambda_steps,
                                         M=M, seed=seed)
    p = build_second_layer(first, r_fwd, sim, cheap_path=cheap_path, M=M, seed=seed, eta_path=eta_path)
    p.diagnostics["macroscopic_stamps"] = [int(k) for k in jd]
    return p


# --------------------------------------------------------------------------
# recovery and checks

def undo_parametrisation(p, times=None):
    """Original-time paths ``(X, xi)`` recovered from both layers.

    Returns arrays ``(X_left, X_right, xi_left, xi_right)`` on ``times``
    (default: the source stamps), each with shape ``(n_times, N, .)``.
    """
    times = p.source_grid if times is None else np.asarray(times, dtype=float)
    u_r = p.r_fwd(times)[:, 0]
    u_l = p.r_fwd.left_limit(times)[:, 0]
    n = len(times)
    XL = np.empty((n, p.N, p.d))
    XR = np.empty_like(XL)
    ZL = np.empty((n, p.N, p.l))
    ZR = np.empty_like(ZL)
    for i, sec in enumerate(p.second):
        path = sec.path()
        w_r = np.clip(sec.s_fwd(u_r)[:, 0], 0.0, 1.0)
        w_l = np.clip(sec.s_fwd.left_limit(u_l)[:, 0], 0.0, 1.0)
        vr, vl = path(w_r), path(w_l)
        XR[:, i], ZR[:, i] = vr[:, :p.d], vr[:, p.d:]
        XL[:, i], ZL[:, i] = vl[:, :p.d], vl[:, p.d:]
    return XL, XR, ZL, ZR


def roundtrip_error(p, sim):
    XL, XR, ZL, ZR = undo_parametrisation(p)
    return max(np.abs(XL - sim.X_left).max(), np.abs(XR - sim.X_right).max(),
               np.abs(ZL - sim.xi_left).max(), np.abs(ZR - sim.xi_right).max())


def layer_consistency_errors(p, sim):
    """Worst violation of the jump-consistency relations on both layers."""
    co = p.coefficients
    first = p.first
    # first layer against the source paths at time hat_r(u)
    times = first.hat_r(first.grid)
    src_X = np.stack([sim.state_path(i).left_limit(times) for i in range(sim.N)], axis=1)
    src_Z = np.stack([sim.control_path(i).left_limit(times) for i in range(sim.N)], axis=1)
    gam = co.eval_gamma(times)                               # (n, d, l)
    err1 = 0.0
    for X, Z in ((first.X_left, first.xi_left), (first.X_right, first.xi_right)):
        pred = src_X + np.einsum("ndl,nil->nid", gam, Z - src_Z)
        err1 = max(err1, float(np.abs(X - pred).max()))
    # second layer against the first layer at u = s_bar(w)
    err2 = 0.0
    for i, sec in enumerate(p.second):
        u = sec.s_bar(sec.grid)
        fp = first.particle_path(i)
        lv = fp.left_limit(u)
        g = co.eval_gamma(first.hat_r(u))
        pred = lv[:, :p.d] + np.einsum("ndl,nl->nd", g, sec.xi - lv[:, p.d:])
        err2 = max(err2, float(np.abs(sec.X - pred).max()))
    return err1, err2


def first_layer_modulus(p):
    """Largest W2 step between consecutive first-layer nodes and across node jumps."""
    f = p.first
    out = 0.0
    for n in range(len(f.grid)):
        a = EmpiricalMeasure.from_xy(f.X_left[n], f.xi_left[n])
        b = EmpiricalMeasure.from_xy(f.X_right[n], f.xi_right[n])
        out = max(out, wasserstein2(a, b))
        if n + 1 < len(f.grid):
            c = EmpiricalMeasure.from_xy(f.X_left[n + 1], f.xi_left[n + 1])
            out = max(out, wasserstein2(b, c))
    return out


# --------------------------------------------------------------------------
# Lipschitz approximation

def _remove_increments(X_l, X_r, Z_l, Z_r, Zt_l, Zt_r, gammas_seg, gammas_node):
    """States after replacing controls ``Z`` by ``Zt``: subtract gamma times removed increments."""
    R_l, R_r = Z_l - Zt_l, Z_r - Zt_r
    n = len(X_l)
    XL, XR = X_l.copy(), X_r.copy()
    acc = np.zeros_like(X_l[0])
    for k in range(n):
        if k > 0:
            acc = acc + np.einsum("dl,...l->...d", gammas_seg[k - 1], R_l[k] - R_r[k - 1])
        XL[k] = X_l[k] - acc
        acc = acc + np.einsum("dl,...l->...d", gammas_node[k], R_r[k] - R_l[k])
        XR[k] = X_r[k] - acc
    return XL, XR


def lipschitz_approximation(p, params):
    """Truncate controls at ``N_trunc`` and perturb both clocks with weight ``delta``.

    The first-layer clock becomes Lipschitz with bound
    ``(1 + delta((T - t) + l N)) / delta``; each second layer (control and
    clock together) with bound ``(1 + delta(1 + l N)) / delta``.
    """
    co = p.coefficients
    Ntr, delta = float(params.N_trunc), float(params.delta)
    t, T, l = p.t, p.T, p.l
    f = p.first
    u = f.grid
    pre = f.xi_left[0]

    # truncation, first layer
    trunc = lambda Z, P: P + np.minimum(Z - P, Ntr)  # noqa: E731
    ZtL, ZtR = trunc(f.xi_left, pre), trunc(f.xi_right, pre)
    times = f.hat_r(u)
    g_node = co.eval_gamma(times)
    g_seg = co.eval_gamma(0.5 * (times[1:] + times[:-1]))
    XtL, XtR = _remove_increments(f.X_left, f.X_right, f.xi_left, f.xi_right, ZtL, ZtR, g_seg, g_node)

    # first-layer clock alpha; the norm term uses left values so alpha stays continuous
    nm = _l2(ZtL - pre)
    D_alpha = 1 + delta * ((T - t) + nm[-1])
    alpha = (u + delta * ((times - t) + nm)) / D_alpha
    alpha[0], alpha[-1] = 0.0, 1.0
    lip_r = (1 + delta * ((T - t) + l * Ntr)) / delta
    hat_r = TimeChange(alpha, times, lipschitz_bound=lip_r)
    first = FirstLayer(alpha, XtL, XtR, ZtL, ZtR, hat_r)
    a_of = lambda v: np.interp(v, u, alpha)  # noqa: E731
    r_fwd = CadlagPath(p.r_fwd.grid, a_of(p.r_fwd.left), a_of(p.r_fwd.right))

    lip_s = (1 + delta * (1 + l * Ntr)) / delta
    second = []
    worst_beta = 0.0
    for i, sec in enumerate(p.second):
        w = sec.grid
        Zt = trunc(sec.xi, sec.xi[0])
        s_old = sec.s_bar.values
        tt = f.hat_r(s_old)
        gs = co.eval_gamma(0.5 * (tt[1:] + tt[:-1]))
        gn = co.eval_gamma(tt)
        Xt, _ = _remove_increments(sec.X, sec.X, sec.xi, sec.xi, Zt, Zt, gs, gn)
        s1 = a_of(s_old)                                   # clock into the new first layer
        var = np.abs(Zt - Zt[0]).sum(axis=1)
        beta = (w + delta * (s1 + var)) / (1 + delta * (1 + l * Ntr))
        worst_beta = max(worst_beta, float(np.max(np.abs(beta - w))))
        grid = beta.copy()
        Xn, Zn, Sn = Xt, Zt, s1
        if grid[-1] < 1.0:
            grid = np.append(grid, 1.0)
            Xn = np.vstack([Xt, Xt[-1]])
            Zn = np.vstack([Zt, Zt[-1]])
            Sn = np.append(s1, s1[-1])
        b_of = lambda v, w=w, beta=beta: np.interp(v, w, beta)  # noqa: E731
        s_fwd = CadlagPath(alpha, b_of(sec.s_fwd.left[:, 0])[:, None], b_of(sec.s_fwd.right[:, 0])[:, None])
        second.append(SecondLayer(grid, Xn, Zn, TimeChange(grid, Sn, lipschitz_bound=lip_s), s_fwd))
    out = TwoLayerParametrisation(first, second, r_fwd, t, T, p.d, l, co, provenance=p.provenance)
    out.diagnostics.update({
        "lipschitz_first": lip_r, "lipschitz_second": lip_s,
        "alpha_deviation": float(np.max(np.abs(alpha - u))),
        "alpha_bound": 2 * delta * ((T - t) + l * Ntr),
        "beta_deviation": worst_beta, "beta_bound": 3 * delta * (1 + l * Ntr),
    })
    return out


def second_layer_lipschitz(sec):
    """Largest chord ratio of ``|d xi|_1 + |d s|`` over ``dw`` on a second layer."""
    dw = np.diff(sec.grid)
    num = np.abs(np.diff(sec.xi, axis=0)).sum(axis=1) + np.abs(np.diff(sec.s_bar.values))
    return float(np.max(num / dw)) if len(dw) else 0.0


# --------------------------------------------------------------------------
# bounded-velocity approximation

def _bspline_kernel(eps, h):
    # cubic B-spline with support [-eps, eps]
    x = np.arange(-eps, eps + h / 2, h) / (eps / 2)
    ax = np.abs(x)
    k = np.where(ax < 1, 2 / 3 - ax ** 2 + ax ** 3 / 2, np.where(ax < 2, (2 - ax) ** 3 / 6, 0.0))
    return k / k.sum()


def mollify_time_change(hat_r, eps, n_fine=None):
    """Smooth ``hat_r`` with a B-spline bump of half-width ``eps``; endpoints are preserved.

    The path is extended by odd reflection about both endpoints, so the
    smoothed map is monotone and hits ``t`` and ``T`` exactly.
    """
    if not 0 < eps <= 0.5:
        raise ValueError("mollifier width must lie in (0, 0.5]")
    n_fine = n_fine or max(4001, int(math.ceil(40 / eps)) + 1)
    u = np.linspace(0.0, 1.0, n_fine)
    h = u[1] - u[0]
    v = hat_r(u)
    t, T = v[0], v[-1]
    m = int(math.ceil(eps / h)) + 1
    ext = np.concatenate([2 * t - v[m:0:-1], v, 2 * T - v[-2:-m - 2:-1]])
    ker = _bspline_kernel(eps, h)
    sm = np.convolve(ext, ker, mode="same")[m:m + n_fine]
    sm = np.maximum.accumulate(np.clip(sm, t, T))
    sm[0], sm[-1] = t, T
    return TimeChange(u, sm)


@dataclass
class BoundedVelocityApproximation:
    policy: ControlPolicy
    K: float
    paths: list
    r_eps_delta: TimeChange


def bounded_velocity_approximation(p, eps, delta, times=None, refine=1):
    """Monotone Lipschitz control paths approximating the parametrised control.

    ``xi~(v) = xi_bar(s^delta(r^{eps,delta}(v)))`` per particle, sampled on the
    source stamps (optionally refined).  ``K`` is the largest realised chord
    rate over particles and components.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    t, T = p.t, p.T
    r_eps = mollify_time_change(p.hat_r, eps)
    vals = t + ((r_eps.values - t) + delta * r_eps.grid) / ((T - t) + delta) * (T - t)
    r_ed = TimeChange(r_eps.grid, vals)
    if times is None:
        g = p.source_grid
        if refine > 1:
            g = np.unique(np.concatenate([np.linspace(a, b, refine + 1) for a, b in zip(g[:-1], g[1:])]))
        times = g
    times = np.asarray(times, dtype=float)
    u = right_continuous_inverse(r_ed, np.clip(times, t, T))
    paths = []
    K = 0.0
    for sec in p.second:
        sd = TimeChange(sec.grid, (sec.s_bar.values + delta * sec.grid) / (1 + delta))
        w = right_continuous_inverse(sd, np.clip(u, sd.values[0], sd.values[-1]))
        z = sec.path()(w)[:, p.d:]
        z = np.maximum.accumulate(z, axis=0)
        path = MonotoneControlPath(times, z, z)
        paths.append(path)
        if len(times) > 1:
            K = max(K, float(np.max(np.diff(z, axis=0) / np.diff(times)[:, None])))
    policy = ControlPolicy.prescribed(paths, label=f"bounded-velocity eps={eps:g} delta={delta:g}")
    return BoundedVelocityApproximation(policy, K, paths, r_ed)
