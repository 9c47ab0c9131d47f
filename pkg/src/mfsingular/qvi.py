"""Cylinder test functionals on empirical measures, the measure generator and QVI residual checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expr import Expression
from .jump_cost import measure_jump_cost
from .measures import EmpiricalMeasure


class CylinderFunctional:
    """``u(t, m) = F(t, <psi_1, m>, ..., <psi_k, m>)`` with symbolic derivatives.

    ``psis`` are DSL strings over ``x`` and ``xi``; ``F`` is a DSL string over
    ``t`` and ``a0 .. a{k-1}``.
    """

    def __init__(self, psis, F, d, l):
        if isinstance(psis, str):
            psis = [psis]
        self.d, self.l = d, l
        self.k = len(psis)
        names = {"x": d, "xi": l}
        self.psi = [Expression(s, names) for s in psis]
        fnames = {"t": None, **{f"a{j}": None for j in range(self.k)}}
        self.F = Expression(F, fnames)
        self.dF = [self.F.derivative(f"a{j}") for j in range(self.k)]
        self.d2F = [[self.dF[i].derivative(f"a{j}") for j in range(self.k)] for i in range(self.k)]
        self.dFt = self.F.derivative("t")
        # gradients and Hessians of psi in (x, xi), index order x[0..d-1], xi[0..l-1]
        coords = [("x", i) for i in range(d)] + [("xi", j) for j in range(l)]
        self.dpsi = [[p.derivative(n, i) for (n, i) in coords] for p in self.psi]
        self.d2psi = [[[g.derivative(n, i) for (n, i) in coords] for g in row] for row in self.dpsi]
        self.source = {"psi": list(psis), "F": F}

    # ------------------------------------------------------------------
    def _env(self, x, xi):
        return {"x": np.asarray(x, float), "xi": np.asarray(xi, float)}

    def moments(self, m):
        env = self._env(m.x, m.xi)
        return np.array([float(np.mean(p(env, (m.N,)))) for p in self.psi])

    def _fenv(self, t, a):
        return {"t": np.asarray(t, float), **{f"a{j}": np.asarray(a[j], float) for j in range(self.k)}}

    def value_from_moments(self, t, a):
        return float(self.F(self._fenv(t, a), ()))

    def __call__(self, t, m):
        return self.value_from_moments(t, self.moments(m))

    def time_derivative(self, t, m):
        return float(self.dFt(self._fenv(t, self.moments(m)), ()))

    def outer_gradient(self, t, a):
        env = self._fenv(t, a)
        return np.array([float(e(env, ())) for e in self.dF])

    def outer_hessian(self, t, a):
        env = self._fenv(t, a)
        return np.array([[float(e(env, ())) for e in row] for row in self.d2F])

    def psi_values(self, x, xi):
        x = np.atleast_2d(x)
        xi = np.atleast_2d(xi)
        env = self._env(x, xi)
        n = x.shape[0]
        val = np.stack([p(env, (n,)) for p in self.psi], axis=-1)                            # (n, k)
        grad = np.stack([np.stack([g(env, (n,)) for g in row], axis=-1) for row in self.dpsi], axis=1)  # (n, k, D)
        hess = np.stack([np.stack([np.stack([h(env, (n,)) for h in r2], axis=-1) for r2 in row], axis=-2)
                         for row in self.d2psi], axis=1)                                    # (n, k, D, D)
        return val, grad, hess

    def mixture_value(self, t, m, x, xi, eps):
        """``u`` at ``(1 - eps) m + eps delta_(x, xi)``."""
        val, _, _ = self.psi_values(x, xi)
        a = (1 - eps) * self.moments(m) + eps * val[0]
        return self.value_from_moments(t, a)


@dataclass
class LinearDerivative:
    value: np.ndarray      # (n,)
    grad: np.ndarray       # (n, d + l)
    hess_xx: np.ndarray    # (n, d, d)
    hess: np.ndarray       # (n, d + l, d + l)


def linear_derivative(u, t, m, x, xi):
    """``delta_m u(t, m, x, xi) = sum_j dF_j(<psi, m>) psi_j(x, xi)`` with gradient and Hessian in ``(x, xi)``.

    No additive normalisation is applied.
    """
    dF = u.outer_gradient(t, u.moments(m))
    val, grad, hess = u.psi_values(x, xi)
    H = np.einsum("k,nkab->nab", dF, hess)
    with np.errstate(over="raise", invalid="raise"):
        return LinearDerivative(val @ dF, np.einsum("k,nka->na", dF, grad), H[:, :u.d, :u.d], H)


def generator(u, t, m, coeffs):
    """``d_t u + mean_i [ b . d_x delta u + 1/2 (sigma sigma^T) : d_xx delta u ]`` on an empirical measure."""
    x, xi = m.x, m.xi
    ld = linear_derivative(u, t, m, x, xi)
    mom = coeffs.moments(x, xi, keepdims=False)
    b = coeffs.eval_b(t, mom, x, xi)
    s = coeffs.eval_sigma(t, x, xi)
    a = np.einsum("nij,nkj->nik", s, s)
    terms = np.einsum("ni,ni->n", b, ld.grad[:, :u.d]) + 0.5 * np.einsum("nij,nij->n", a, ld.hess_xx)
    return u.time_derivative(t, m) + float(terms.mean())


def _margins(u, t, m, coeffs, x, xi):
    """``c_j - (d_x delta u . gamma_{., j} + d_{xi_j} delta u)`` at the given points, shape ``(n, l)``."""
    ld = linear_derivative(u, t, m, x, xi)
    gamma = coeffs.eval_gamma(t)
    mom = {k: np.full(len(x), v) for k, v in m.moments(coeffs).items()}
    c = coeffs.eval_c(t, mom, x, xi)
    push = ld.grad[:, :u.d] @ gamma + ld.grad[:, u.d:]
    return c - push


@dataclass
class MarginResult:
    margin: float
    x: np.ndarray
    xi: np.ndarray
    component: int
    on_support: bool
    support_margin: float
    support_index: int


def intervention_margin(u, t, m, coeffs, box=None, n_samples=0, seed=0):
    """Smallest intervention margin over the support of ``m`` and uniform samples from ``box``.

    ``box`` is a pair of arrays ``(low, high)`` of length ``d + l``.
    """
    x, xi = m.x, m.xi
    mg = _margins(u, t, m, coeffs, x, xi)
    flat = mg.min(axis=1)
    si = int(np.argmin(flat))
    best = (float(flat[si]), x[si], xi[si], int(np.argmin(mg[si])), True)
    if box is not None and n_samples > 0:
        lo, hi = (np.broadcast_to(np.asarray(v, float), (u.d + u.l,)) for v in box)
        rng = np.random.default_rng(seed)
        pts = lo + (hi - lo) * rng.random((n_samples, u.d + u.l))
        ms = _margins(u, t, m, coeffs, pts[:, :u.d], pts[:, u.d:])
        j = int(np.argmin(ms.min(axis=1)))
        if ms[j].min() < best[0]:
            best = (float(ms[j].min()), pts[j, :u.d], pts[j, u.d:], int(np.argmin(ms[j])), False)
    return MarginResult(best[0], best[1], best[2], best[3], best[4], float(flat[si]), si)


@dataclass
class QviResidual:
    hjb_part: float
    intervention_part: float
    witness: MarginResult
    terminal: bool = False

    @property
    def residual(self):
        return min(self.hjb_part, self.intervention_part)

    def record(self):
        return {"hjb_part": self.hjb_part, "intervention_part": self.intervention_part,
                "residual": self.residual, "terminal": self.terminal,
                "witness_x": np.asarray(self.witness.x).tolist(), "witness_xi": np.asarray(self.witness.xi).tolist(),
                "witness_component": self.witness.component}


def qvi_residual(u, t, m, coeffs, T=None, box=None, n_samples=0, seed=0):
    """Both parts of the QVI at ``(t, m)``; at ``t == T`` the first part is ``u(T, m) - <g, m>``."""
    x, xi = m.x, m.xi
    mom = coeffs.moments(x, xi, keepdims=False)
    terminal = T is not None and abs(t - T) <= 1e-12
    if terminal:
        first = u(t, m) - float(np.mean(coeffs.eval_g(mom, x, xi)))
    else:
        first = -generator(u, t, m, coeffs) - float(np.mean(coeffs.eval_f(t, mom, x, xi)))
    w = intervention_margin(u, t, m, coeffs, box, n_samples, seed)
    return QviResidual(first, w.margin, w, terminal)


# --------------------------------------------------------------------------
# first-order intervention tests

def moved_measure(m, t, coeffs, subset, direction, eps):
    """Move the particles in ``subset`` by ``eps * direction`` in the control and ``gamma(t)`` times it in the state."""
    d = np.zeros((m.N, m.l))
    d[np.asarray(subset, dtype=int)] = np.asarray(direction, float)
    dxi = eps * d
    gamma = coeffs.eval_gamma(t)
    return EmpiricalMeasure.from_xy(m.x + dxi @ gamma.T, m.xi + dxi)


def first_order_prediction(u, t, m, coeffs, subset, direction):
    """Predicted slope ``(1/N) sum_{i in subset} d delta u . (gamma v, v)``."""
    ld = linear_derivative(u, t, m, m.x, m.xi)
    gamma = coeffs.eval_gamma(t)
    v = np.asarray(direction, float)
    push = ld.grad[:, :u.d] @ (gamma @ v) + ld.grad[:, u.d:] @ v
    return float(push[np.asarray(subset, dtype=int)].sum() / m.N)


def second_order_bound(u, t, m, coeffs, subset, direction):
    """Second derivative of ``eps -> u(t, m_eps)`` at zero, from the symbolic Hessians."""
    gamma = coeffs.eval_gamma(t)
    v = np.asarray(direction, float)
    w = np.concatenate([gamma @ v, v])
    val, grad, hess = u.psi_values(m.x, m.xi)
    idx = np.asarray(subset, dtype=int)
    da = grad[idx] @ w                                   # (|S|, k)
    d2a = np.einsum("nkab,a,b->nk", hess[idx], w, w)
    da = da.sum(axis=0) / m.N
    d2a = d2a.sum(axis=0) / m.N
    a = u.moments(m)
    return float(da @ u.outer_hessian(t, a) @ da + u.outer_gradient(t, a) @ d2a)


def richardson_slope(u, t, m, coeffs, subset, direction, eps):
    """Slope of ``eps -> u(t, m_eps) - u(t, m)`` at zero, extrapolated from ``eps`` and ``eps / 2``."""
    base = u(t, m)
    D1 = u(t, moved_measure(m, t, coeffs, subset, direction, eps)) - base
    D2 = u(t, moved_measure(m, t, coeffs, subset, direction, eps / 2)) - base
    return 2 * (D2 / (eps / 2)) - D1 / eps


@dataclass
class KeyLemmaReport:
    direction: str
    trials: list = field(default_factory=list)
    violation_found: bool = False
    margin: float = 0.0

    def record(self):
        return {"direction": self.direction, "violation_found": self.violation_found, "margin": self.margin,
                "trials": self.trials}


def key_lemma_check(u, t, m, coeffs, jump_cost=None, trials=8, seed=0, eps=1e-2, box=None, n_samples=0,
                    cost_kw=None):
    """Sample the first-order intervention lemma at ``(t, m)``.

    With a non-negative sampled margin, random small reachable moves must
    satisfy ``u(m') - u(m) <= C_m(m, m') + tol``.  With a violation on the
    support, moving the witness particle must break the inequality by more
    than ``tol``.  ``tol`` is the second-order Taylor term.
    """
    jump_cost = jump_cost or (lambda t_, a, b: measure_jump_cost(t_, a, b, coeffs, **(cost_kw or {})).value)
    w = intervention_margin(u, t, m, coeffs, box, n_samples, seed)
    rng = np.random.default_rng(seed)
    base = u(t, m)
    if w.support_margin >= 0:
        rep = KeyLemmaReport("supersolution", margin=w.margin)
        for _ in range(trials):
            size = int(rng.integers(1, m.N + 1))
            subset = np.sort(rng.choice(m.N, size=size, replace=False))
            v = rng.random(m.l)
            v /= max(v.sum(), 1e-300)
            e = eps * rng.random()
            mp = moved_measure(m, t, coeffs, subset, v, e)
            gain = u(t, mp) - base
            cost = jump_cost(t, m, mp)
            tol = e * e * abs(second_order_bound(u, t, m, coeffs, subset, v)) + 1e-12
            ok = gain <= cost + tol
            rep.trials.append({"subset": subset.tolist(), "eps": e, "gain": gain, "cost": cost, "tol": tol, "ok": ok})
            rep.violation_found |= not ok
        return rep
    rep = KeyLemmaReport("violator", margin=w.support_margin)
    i = w.support_index
    mg = _margins(u, t, m, coeffs, m.x[i:i + 1], m.xi[i:i + 1])[0]
    j = int(np.argmin(mg))
    subset = np.flatnonzero(np.all(np.isclose(m.points, m.points[i]), axis=1))
    v = np.zeros(m.l)
    v[j] = 1.0
    for e in (eps, eps / 2, eps / 4):
        mp = moved_measure(m, t, coeffs, subset, v, e)
        gain = u(t, mp) - base
        cost = jump_cost(t, m, mp)
        tol = e * e * abs(second_order_bound(u, t, m, coeffs, subset, v)) + 1e-12
        broken = gain > cost + tol
        rep.trials.append({"subset": subset.tolist(), "eps": e, "gain": gain, "cost": cost, "tol": tol,
                           "broken": broken})
        rep.violation_found |= broken
    return rep


# --------------------------------------------------------------------------
# Ito consistency along simulated flows

@dataclass
class ItoCheck:
    delta_u: float
    integral: float
    martingale: float     # realised noise term, ensemble mean
    band: float           # standard error of the noise term
    remainder: float      # first-order Euler remainder scale, proportional to dt
    dt: float
    ensemble_term: float = 0.0   # finite-ensemble curvature term, independent of dt

    @property
    def bound(self):
        return 2 * self.remainder + self.ensemble_term

    @property
    def error(self):
        return abs(self.delta_u - self.integral)

    @property
    def compensated_error(self):
        """Error after removing the realised noise term; what is left is discretisation."""
        return abs(self.delta_u - self.integral - self.martingale)


def ito_check(u, sim, coeffs=None):
    """Compare ``u(T, m_T) - u(t, m_t)`` with the left-point integral of the generator along ``sim``.

    The noise term is rebuilt per particle from the stored Brownian increments:
    ``d_x delta u . sigma dW + 1/2 tr(d_xx delta u (sigma dW dW^T sigma^T - sigma sigma^T dt))``.
    ``remainder`` is ``dt / 2`` times the time integral of ``mean(|d_xx delta u| |b|^2)`` plus the
    outer curvature ``|a' d^2F a'|`` of the moment drift ``a'``; ``ensemble_term`` is the
    finite-ensemble curvature term ``(T - t) max|d^2F| |sigma|^2 |d psi|^2 / N``.
    """
    co = coeffs or sim.coefficients
    g = sim.grid
    integral = 0.0
    mart = np.zeros(sim.N)
    rem = 0.0
    curv = 0.0
    for k in range(len(g) - 1):
        dt = g[k + 1] - g[k]
        m = sim.measure(k)
        t = float(g[k])
        integral += generator(u, t, m, co) * dt
        ld = linear_derivative(u, t, m, m.x, m.xi)
        s = co.eval_sigma(t, m.x, m.xi)
        sdw = np.einsum("nij,nj->ni", s, sim.dW[k])
        a = np.einsum("nij,nkj->nik", s, s)
        mart += np.einsum("ni,ni->n", ld.grad[:, :u.d], sdw)
        mart += 0.5 * (np.einsum("nij,ni,nj->n", ld.hess_xx, sdw, sdw) - dt * np.einsum("nij,nij->n", ld.hess_xx, a))
        mom = co.moments(m.x, m.xi, keepdims=False)
        b = co.eval_b(t, mom, m.x, m.xi)
        hn = np.abs(ld.hess_xx).reshape(sim.N, -1).max(axis=1)
        _, pg, _ = u.psi_values(m.x, m.xi)
        drift_a = np.einsum("nkd,nd->k", pg[:, :, :u.d], b) / sim.N        # drift of the inner moments
        Hout = u.outer_hessian(t, u.moments(m))
        rem += dt * dt * 0.5 * (float(np.mean(hn * (b ** 2).sum(axis=1))) + abs(float(drift_a @ Hout @ drift_a)))
        H = np.abs(Hout).max()
        curv = max(curv, H * float(np.mean((s ** 2).sum(axis=(1, 2)))) * (pg ** 2).max())
    du = u(float(g[-1]), sim.measure(len(g) - 1)) - u(float(g[0]), sim.measure(0))
    band = float(mart.std(ddof=1) / np.sqrt(sim.N)) if sim.N > 1 else 0.0
    ens = (g[-1] - g[0]) * curv / sim.N
    return ItoCheck(du, integral, float(mart.mean()), band, rem, float(g[1] - g[0]), ens)
