"""Interacting-particle Euler-Maruyama simulation with monotone controls."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .expr import Expression
from .measures import EmpiricalMeasure, MeasureFlow
from .paths import GEOM_TOL, CadlagPath, MonotoneControlPath, check_monotone


class SimulationError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# policies

@dataclass
class ControlPolicy:
    """How the control moves.

    * ``none``: the control stays at its initial level.
    * ``prescribed``: one monotone path per particle (or one shared path);
      only increments relative to the path's pre-initial value are used.
      Jumps of the path at simulation stamps are applied atomically; jumps
      between stamps are merged into the next Euler increment.
    * ``feedback``: ``rate(t, moments, x, xi) -> (N, l)`` clipped to ``[0, K]``.

    ``jumps`` optionally adds atomic jumps ``(time, increment)`` for every
    particle at the stamp nearest to ``time``, on top of any policy kind.
    """

    kind: str = "none"
    paths: list | None = None
    rate: object = None
    K: float | None = None
    label: str = ""
    jumps: tuple = ()

    @classmethod
    def none(cls):
        return cls("none", label="none")

    @classmethod
    def prescribed(cls, paths, label="prescribed"):
        paths = list(paths) if isinstance(paths, (list, tuple)) else [paths]
        for p in paths:
            check_monotone(p)
        return cls("prescribed", paths=paths, label=label)

    @classmethod
    def feedback(cls, rate, K, label="feedback"):
        if K is None or K < 0:
            raise ValueError("feedback policies need a rate cap K >= 0")
        return cls("feedback", rate=rate, K=float(K), label=label)

    @classmethod
    def from_expressions(cls, sources, K, coeffs, label=None):
        """Feedback rates from DSL strings over ``t``, ``x``, ``xi`` and the moments."""
        if isinstance(sources, str):
            sources = [sources]
        if len(sources) != coeffs.l:
            raise ValueError(f"need {coeffs.l} rate expression(s)")
        exprs = [Expression(s, coeffs.names()) for s in sources]

        def rate(t, mom, x, xi):
            env = {"t": t, "x": x, "xi": xi, **mom}
            return np.stack([e(env, x.shape[:-1]) for e in exprs], axis=-1)

        return cls.feedback(rate, K, label=label or ";".join(sources))

    def with_jump(self, time, increment):
        inc = np.atleast_1d(np.asarray(increment, dtype=float))
        if np.any(inc < 0):
            raise ValueError("jump increments must be non-negative")
        return ControlPolicy(self.kind, self.paths, self.rate, self.K,
                             f"{self.label}|jump {inc.tolist()}@{time:g}", self.jumps + ((float(time), inc),))

    def rates(self, t, mom, x, xi):
        u = np.asarray(self.rate(t, mom, x, xi), dtype=float)
        u = np.broadcast_to(u, xi.shape)
        return np.clip(np.nan_to_num(u, nan=0.0), 0.0, self.K)


# --------------------------------------------------------------------------
# results

@dataclass
class SimulationResult:
    grid: np.ndarray          # (K + 1,)
    X_left: np.ndarray        # (K + 1, N, d)
    X_right: np.ndarray
    xi_left: np.ndarray       # (K + 1, N, l)
    xi_right: np.ndarray
    dW: np.ndarray            # (K, N, m)
    seed: int
    config_hash: str
    coefficients: object = None
    step_offset: int = 0
    policy_label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.X_left.shape[1]

    @property
    def d(self):
        return self.X_left.shape[2]

    @property
    def l(self):
        return self.xi_left.shape[2]

    @property
    def t0(self):
        return float(self.grid[0])

    @property
    def T(self):
        return float(self.grid[-1])

    def flow(self):
        left = np.concatenate([self.X_left, self.xi_left], axis=2)
        right = np.concatenate([self.X_right, self.xi_right], axis=2)
        return MeasureFlow(self.grid, left, right, self.d, self.l)

    def measure(self, k, side="right"):
        if side == "right":
            return EmpiricalMeasure.from_xy(self.X_right[k], self.xi_right[k])
        return EmpiricalMeasure.from_xy(self.X_left[k], self.xi_left[k])

    def state_path(self, i):
        return CadlagPath(self.grid, self.X_left[:, i], self.X_right[:, i])

    def control_path(self, i):
        return MonotoneControlPath(self.grid, self.xi_left[:, i], self.xi_right[:, i])

    def joint_path(self, i):
        return CadlagPath(self.grid, np.concatenate([self.X_left[:, i], self.xi_left[:, i]], axis=1),
                          np.concatenate([self.X_right[:, i], self.xi_right[:, i]], axis=1))

    def jump_mask(self, tol=0.0):
        """``(K + 1, N)`` mask of stamps where a particle's control jumps."""
        return np.max(np.abs(self.xi_right - self.xi_left), axis=2) > tol

    def has_jumps(self, tol=0.0):
        return bool(self.jump_mask(tol).any())

    def save(self, path):
        np.savez_compressed(path, grid=self.grid, X_left=self.X_left, X_right=self.X_right,
                            xi_left=self.xi_left, xi_right=self.xi_right, dW=self.dW,
                            seed=self.seed, config_hash=self.config_hash, step_offset=self.step_offset)

    @classmethod
    def load(cls, path, coefficients=None):
        with np.load(path, allow_pickle=False) as z:
            return cls(z["grid"], z["X_left"], z["X_right"], z["xi_left"], z["xi_right"], z["dW"],
                       int(z["seed"]), str(z["config_hash"]), coefficients, int(z["step_offset"]))


# --------------------------------------------------------------------------

def apply_singular_jump(x, xi, t, dxi, coeffs):
    """Jump every particle's control by ``dxi`` at time ``t``; states move along gamma."""
    dxi = np.asarray(dxi, dtype=float)
    if np.any(dxi < 0):
        raise ValueError("jump increments must be non-negative")
    gamma = coeffs.eval_gamma(float(t))
    return x + dxi @ gamma.T, xi + dxi


def brownian_increments(seed, steps, N, m, dt, step_offset=0):
    """Increments for global steps ``step_offset .. step_offset + steps - 1``.

    Step ``k`` draws from a generator keyed by ``(seed, k)`` and particle ``i``
    takes row ``i``, so a run restarted at a later step reuses the same noise.
    """
    out = np.empty((steps, N, m))
    sq = np.sqrt(dt)
    for k in range(steps):
        rng = np.random.default_rng([int(seed), int(step_offset + k)])
        out[k] = sq * rng.standard_normal((N, m))
    return out


def _check_finite(x, xi, k, t):
    ok = np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(xi), axis=1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise SimulationError(f"non-finite state at stamp {k} (t={t:.6g}), particle {bad}")


def _snap(grid, stamps):
    """Move grid points lying within rounding distance of a path stamp onto it."""
    g = grid.copy()
    j = np.clip(np.searchsorted(stamps, g), 1, max(len(stamps) - 1, 1))
    tol = GEOM_TOL * max(1.0, float(np.abs(grid).max()))
    for cand in (j - 1, np.minimum(j, len(stamps) - 1)):
        near = np.abs(stamps[cand] - g) <= tol
        g[near] = stamps[cand[near]]
    return g


def _config_hash(scenario, policy, seed, step_offset):
    h = hashlib.sha256()
    h.update(scenario.hash().encode())
    h.update(f"|{policy.kind}|{policy.label}|{policy.K}|{seed}|{step_offset}|{len(policy.jumps)}".encode())
    return h.hexdigest()[:16]


def simulate(scenario, policy=None, seed=0, *, step_offset=0, noise=None, frozen_flow=None,
             x0=None, xi0=None):
    """Euler-Maruyama on the scenario grid with the same-ensemble empirical measure.

    ``noise`` (shape ``(steps, N, m)``) overrides the generated increments;
    ``frozen_flow`` replaces the ensemble measure by a given flow.
    """
    policy = policy or ControlPolicy.none()
    co = scenario.coefficients
    disc = scenario.disc
    K = disc.steps
    grid = np.linspace(disc.t0, disc.T, K + 1)
    dt = (disc.T - disc.t0) / K
    if x0 is None or xi0 is None:
        x0, xi0 = scenario.initial_ensemble()
    x = np.array(x0, dtype=float)
    xi = np.array(xi0, dtype=float)
    N = len(x)
    if noise is None:
        noise = brownian_increments(seed, K, N, co.m_bm, dt, step_offset)
    elif noise.shape != (K, N, co.m_bm):
        raise ValueError(f"noise must have shape {(K, N, co.m_bm)}")

    X_left = np.empty((K + 1, N, co.d))
    X_right = np.empty_like(X_left)
    xi_left = np.empty((K + 1, N, co.l))
    xi_right = np.empty_like(xi_left)

    if policy.kind == "prescribed":
        paths = policy.paths if len(policy.paths) == N else policy.paths * N
        if len(paths) != N:
            raise ValueError("need one prescribed path per particle or a single shared path")
        pl = np.stack([p.left_limit(_snap(grid, p.grid)) - p.pre_initial_value for p in paths], axis=1)
        pr = np.stack([p(_snap(grid, p.grid)) - p.pre_initial_value for p in paths], axis=1)
        xi_pl = xi[None] + pl
        xi_pr = xi[None] + pr

    extra_jumps = {}
    for tj, inc in policy.jumps:
        kj = int(np.clip(np.rint((tj - disc.t0) / dt), 0, K))
        extra_jumps[kj] = extra_jumps.get(kj, 0.0) + np.broadcast_to(inc, (co.l,))

    def moments_at(k, xs, xis):
        if frozen_flow is not None:
            pts = frozen_flow.right[k]
            return co.moments(pts[:, :co.d], pts[:, co.d:])
        return co.moments(xs, xis)

    for k in range(K + 1):
        t = grid[k]
        # left values at stamp k
        X_left[k] = x
        xi_left[k] = xi
        if policy.kind == "prescribed":
            dj = xi_pr[k] - xi_pl[k]
            if np.any(dj != 0):
                x, xi = apply_singular_jump(x, xi, t, np.maximum(dj, 0.0), co)
        if k in extra_jumps:
            x, xi = apply_singular_jump(x, xi, t, np.broadcast_to(extra_jumps[k], xi.shape), co)
        X_right[k] = x
        xi_right[k] = xi
        _check_finite(x, xi, k, t)
        if k == K:
            break
        mom = moments_at(k, x, xi)
        if policy.kind == "feedback":
            dxi = policy.rates(t, mom, x, xi) * dt
        elif policy.kind == "prescribed":
            dxi = np.maximum(xi_pl[k + 1] - xi_pr[k], 0.0)
        else:
            dxi = np.zeros_like(xi)
        with np.errstate(all="ignore"):
            drift = co.eval_b(t, mom, x, xi)
            sig = co.eval_sigma(t, x, xi)
            gamma = co.eval_gamma(t)
            x = x + drift * dt + np.einsum("nij,nj->ni", sig, noise[k]) + dxi @ gamma.T
        xi = xi + dxi
        _check_finite(x, xi, k + 1, grid[k + 1])

    return SimulationResult(grid, X_left, X_right, xi_left, xi_right, noise, int(seed),
                            _config_hash(scenario, policy, seed, step_offset), co, step_offset,
                            policy.label)
