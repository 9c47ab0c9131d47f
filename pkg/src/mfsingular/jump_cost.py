"""Minimal costs of executing control jumps.

* ``pathwise_jump_cost``: cheapest continuous monotone path from ``xi`` to
  ``xi'`` for one particle with the measure frozen.  Paths are discretised
  into ``M`` steps of equal l1 length and charged by midpoint quadrature.
* ``distributional_jump_cost``: cheapest joint schedule moving a paired
  ensemble, with the measure moving along.
* ``measure_jump_cost``: the distributional cost minimised over permutation
  couplings between two ensembles.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .measures import EmpiricalMeasure, _enumerate
from .paths import constant_speed_reparametrisation

ORACLE_PATH_LIMIT = 10**7
TIE_TOL = 1e-12


# product-lattice transitions below which the joint schedule DP is exact and cheap
JOINT_TRANSITION_LIMIT = 250_000


class JumpCostError(ValueError):
    pass


class NonFiniteCostError(JumpCostError, ArithmeticError):
    """The cost evaluated to NaN or infinity along a candidate path."""


@dataclass
class PathwiseJumpQuery:
    t: float
    x: np.ndarray
    xi: np.ndarray
    xi_new: np.ndarray
    m: EmpiricalMeasure | None = None

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        self.xi_new = np.atleast_1d(np.asarray(self.xi_new, dtype=float))
        if self.xi.shape != self.xi_new.shape:
            raise JumpCostError("xi and xi' must have the same length")
        if np.any(self.xi_new < self.xi - 1e-12):
            raise JumpCostError("jump target must dominate the start componentwise")


@dataclass
class Schedule:
    """Per-particle increments on a shared grid: ``alloc[i, k]`` in ``R^l_{>=0}``."""

    start: np.ndarray   # (N, l)
    alloc: np.ndarray   # (N, S, l)

    def __post_init__(self):
        self.alloc = np.asarray(self.alloc, dtype=float)
        self.start = np.asarray(self.start, dtype=float)
        if np.any(self.alloc < -1e-15):
            raise ValueError("schedule increments must be non-negative")

    @property
    def positions(self):
        """Cumulative control levels, shape ``(N, S + 1, l)``."""
        N, S, l = self.alloc.shape
        out = np.empty((N, S + 1, l))
        out[:, 0] = self.start
        out[:, 1:] = self.start[:, None, :] + np.cumsum(self.alloc, axis=1)
        return out

    @property
    def end(self):
        return self.start + self.alloc.sum(axis=1)


@dataclass
class JumpCostResult:
    value: float
    path: np.ndarray | None = None          # (M + 1, l) nodes for a single particle
    schedule: Schedule | None = None
    coupling: tuple | None = None
    diagnostics: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# pathwise

def _frozen_moments(coeffs, m):
    if m is None or not coeffs.moment_exprs:
        return lambda Y, Z: {k: np.zeros(Y.shape[:-1]) for k in coeffs.moment_exprs}
    mom = m.moments(coeffs)
    return lambda Y, Z: {k: np.full(Y.shape[:-1], float(v)) for k, v in mom.items()}


def _self_moments(coeffs):
    # single-atom measure that moves with the particle
    return lambda Y, Z: coeffs.moments(Y[..., None, :], Z[..., None, :], keepdims=False)


class _PathObjective:
    """Vectorised midpoint cost of allocation batches of shape ``(B, M, l)``."""

    def __init__(self, coeffs, t, x0, xi0, moments_fn):
        self.coeffs = coeffs
        self.t = float(t)
        self.x0 = np.asarray(x0, dtype=float)
        self.xi0 = np.asarray(xi0, dtype=float)
        self.gamma = coeffs.eval_gamma(self.t)
        self.moments_fn = moments_fn
        self.evals = 0

    def __call__(self, alloc):
        alloc = np.asarray(alloc, dtype=float)
        mid = self.xi0 + np.cumsum(alloc, axis=-2) - 0.5 * alloc
        Y = self.x0 + (mid - self.xi0) @ self.gamma.T
        c = self.coeffs.eval_c(self.t, self.moments_fn(Y, mid), Y, mid)
        self.evals += alloc.shape[0] if alloc.ndim == 3 else 1
        out = (c * alloc).sum(axis=(-1, -2))
        if not np.all(np.isfinite(out)):
            raise NonFiniteCostError("cost evaluated to a non-finite value along the jump path")
        return out


def _alloc_from_polyline(vertices, M):
    h = constant_speed_reparametrisation(vertices)
    nodes = h(np.linspace(0.0, 1.0, M + 1))
    nodes[0], nodes[-1] = vertices[0], vertices[-1]
    return np.maximum(np.diff(nodes, axis=0), 0.0)


def _alloc_from_moves(delta, moves, G, M):
    """Staircase as ``M`` allocation rows; longest moves are halved along their own axis to fill rows."""
    step = delta / G
    rows = [np.eye(len(delta))[j] * step[j] for j in moves]
    if len(rows) > M:
        return None
    while len(rows) < M:
        k = max(range(len(rows)), key=lambda i: (rows[i].sum(), -i))
        half = rows[k] / 2
        rows[k:k + 1] = [half, half.copy()]
    return np.array(rows)


def _staircase_vertices(xi0, delta, moves, G):
    step = delta / G
    pts = [xi0.copy()]
    cur = xi0.copy()
    for j in moves:
        cur = cur.copy()
        cur[j] += step[j]
        pts.append(cur)
    return np.array(pts)


def _lattice_size(l, M, max_nodes=40000):
    G = max(1, M // l)
    while G > 1 and (G + 1) ** l > max_nodes:
        G -= 1
    return G


def _lattice_dp(obj, xi0, delta, G):
    """Cheapest monotone staircase on a ``G^l`` lattice (edge midpoint rule)."""
    l = len(delta)
    shape = (G + 1,) * l
    idx = np.indices(shape).reshape(l, -1).T          # (n_nodes, l)
    step = delta / G
    n = len(idx)
    strides = np.array([(G + 1) ** (l - 1 - j) for j in range(l)])
    edge = np.full((l, n), np.inf)
    for j in range(l):
        if step[j] == 0:
            continue
        ok = idx[:, j] < G
        start = xi0 + idx[ok] * step
        a = np.zeros((ok.sum(), 1, l))
        a[:, 0, j] = step[j]
        # the objective integrates a one-step path from ``start``
        sub = _PathObjective(obj.coeffs, obj.t, obj.x0 + (start - xi0) @ obj.gamma.T, start, obj.moments_fn)
        edge[j, ok] = _batched_from(sub, start, a)
    V = np.full(n, np.inf)
    arg = np.full(n, -1)
    V[0] = 0.0
    sums = idx.sum(axis=1)
    for s in range(1, l * G + 1):
        nodes = np.flatnonzero(sums == s)
        best = np.full(len(nodes), np.inf)
        barg = np.full(len(nodes), -1)
        for j in range(l):
            has = idx[nodes, j] > 0
            prev = nodes[has] - strides[j]
            cand = V[prev] + edge[j, prev]
            better = cand < best[has] - TIE_TOL
            bh = best[has]
            ah = barg[has]
            bh[better] = cand[better]
            ah[better] = j
            best[has] = bh
            barg[has] = ah
        V[nodes] = best
        arg[nodes] = barg
    moves = []
    node = n - 1
    while node != 0:
        j = arg[node]
        moves.append(j)
        node -= strides[j]
    return float(V[-1]), moves[::-1]


def _batched_from(sub, starts, a):
    # evaluate one-step paths starting at different points in a single batch
    mid = starts[:, None, :] + 0.5 * a
    Y = sub.x0[:, None, :] + (mid - starts[:, None, :]) @ sub.gamma.T
    c = sub.coeffs.eval_c(sub.t, sub.moments_fn(Y, mid), Y, mid)
    return (c * a).sum(axis=(1, 2))


def _pair_moves(alloc, level, rng, max_batch):
    """All transfers of ``level`` between two steps and two components."""
    M, l = alloc.shape
    k1, k2, a, b = np.meshgrid(np.arange(M), np.arange(M), np.arange(l), np.arange(l), indexing="ij")
    mask = (k1 != k2) & (a != b)
    k1, k2, a, b = k1[mask], k2[mask], a[mask], b[mask]
    s = np.minimum(np.minimum(alloc[k1, a], alloc[k2, b]), level)
    keep = s > 1e-15
    k1, k2, a, b, s = k1[keep], k2[keep], a[keep], b[keep], s[keep]
    if len(s) > max_batch:
        pick = np.sort(rng.choice(len(s), max_batch, replace=False))
        k1, k2, a, b, s = k1[pick], k2[pick], a[pick], b[pick], s[pick]
    cand = np.broadcast_to(alloc, (len(s), M, l)).copy()
    r = np.arange(len(s))
    cand[r, k1, a] -= s
    cand[r, k1, b] += s
    cand[r, k2, a] += s
    cand[r, k2, b] -= s
    return np.maximum(cand, 0.0)


def _refine(obj, alloc, value, rng, max_rounds, levels=7, max_batch=4096):
    M = alloc.shape[0]
    unit = alloc.sum() / M
    rounds = 0
    for j in range(levels):
        level = unit * 2.0 ** (-j)
        while rounds < max_rounds:
            cand = _pair_moves(alloc, level, rng, max_batch)
            if len(cand) == 0:
                break
            vals = obj(cand)
            i = int(np.argmin(vals))
            rounds += 1
            if vals[i] < value - 1e-13:
                alloc, value = cand[i], float(vals[i])
            else:
                break
    return alloc, value, rounds


def _lex_key(alloc):
    return tuple(np.round(np.asarray(alloc).ravel(), 12))


def _pick(cands):
    """Lowest value; ties broken by the lexicographically smallest allocation."""
    best = min(v for v, _ in cands)
    tied = [(v, a) for v, a in cands if v <= best + TIE_TOL * max(1.0, abs(best))]
    return min(tied, key=lambda va: _lex_key(va[1]))


def _staircase_alloc(xi0, delta, moves, G, M):
    a = _alloc_from_moves(delta, moves, G, M)
    return a if a is not None else _alloc_from_polyline(_staircase_vertices(xi0, delta, moves, G), M)


def _solve_path(obj, xi0, delta, M, restarts, seed, max_rounds):
    l = len(delta)
    L = float(delta.sum())
    diag = {"M": M, "restarts": restarts, "rounds": 0}
    straight = np.tile(delta / M, (M, 1))
    if L == 0.0:
        return 0.0, straight, diag
    active = np.flatnonzero(delta > 0)
    if len(active) == 1:
        v = float(obj(straight[None])[0])
        diag["closed_form"] = True
        return v, straight, diag
    rng = np.random.default_rng(seed)
    starts = [("straight", straight)]
    G = _lattice_size(l, M)
    _, moves = _lattice_dp(obj, xi0, delta, G)
    starts.append(("lattice", _staircase_alloc(xi0, delta, moves, G, M)))
    for r in range(restarts):
        moves = rng.permutation(np.repeat(active, G))
        starts.append((f"random{r}", _staircase_alloc(xi0, delta, moves, G, M)))
    batch = np.stack([a for _, a in starts])
    vals = obj(batch)
    diag["start_values"] = {name: float(v) for (name, _), v in zip(starts, vals)}
    order = np.argsort(vals, kind="stable")
    cands = []
    # refine the two most promising starts; the rest are kept as they are
    for pos, i in enumerate(order):
        a, v = starts[i][1], float(vals[i])
        if pos < 2 and max_rounds > 0:
            a, v, rounds = _refine(obj, a, v, rng, max_rounds)
            diag["rounds"] += rounds
        cands.append((v, a))
    v, a = _pick(cands)
    return v, a, diag


def pathwise_jump_cost(q, coeffs, M=64, restarts=4, seed=0, max_rounds=40, moments_fn=None):
    """Minimal cost of moving one particle's control from ``q.xi`` to ``q.xi_new``."""
    if M < 1:
        raise JumpCostError("M must be at least 1")
    delta = np.maximum(q.xi_new - q.xi, 0.0)
    mf = moments_fn or _frozen_moments(coeffs, q.m)
    obj = _PathObjective(coeffs, q.t, q.x, q.xi, mf)
    value, alloc, diag = _solve_path(obj, q.xi, delta, M, restarts, seed, max_rounds)
    diag["evaluations"] = obj.evals
    path = np.vstack([q.xi, q.xi + np.cumsum(alloc, axis=0)])
    path[-1] = q.xi_new
    return JumpCostResult(value=value, path=path, diagnostics=diag)


def straight_line_cost(q, coeffs, M=64, moments_fn=None):
    delta = np.maximum(q.xi_new - q.xi, 0.0)
    obj = _PathObjective(coeffs, q.t, q.x, q.xi, moments_fn or _frozen_moments(coeffs, q.m))
    return float(obj(np.tile(delta / M, (M, 1))[None])[0])


def path_cost(q, coeffs, nodes, moments_fn=None):
    """Midpoint cost of the polyline through ``nodes`` (first row ``q.xi``)."""
    alloc = np.diff(np.asarray(nodes, dtype=float), axis=0)
    obj = _PathObjective(coeffs, q.t, q.x, q.xi, moments_fn or _frozen_moments(coeffs, q.m))
    return float(obj(alloc[None])[0])


def count_lattice_paths(l, G):
    return math.factorial(l * G) // math.factorial(G) ** l


def pathwise_jump_cost_oracle(q, coeffs, grid_size=8, limit=ORACLE_PATH_LIMIT):
    """Exhaustive minimum over monotone staircase paths on a ``grid_size^l`` lattice.

    Each lattice edge is charged ``c_j(midpoint) * step_j``.  Raises when the
    number of paths exceeds ``limit``.
    """
    delta = np.maximum(q.xi_new - q.xi, 0.0)
    l = len(delta)
    G = int(grid_size)
    active = [j for j in range(l) if delta[j] > 0]
    n_paths = math.factorial(len(active) * G) // math.factorial(G) ** max(len(active), 1)
    if n_paths > limit:
        raise JumpCostError(f"{n_paths} lattice paths exceed the budget of {limit}")
    if not active:
        return 0.0
    step = delta / G
    gamma = coeffs.eval_gamma(float(q.t))
    mom = q.m.moments(coeffs) if q.m is not None else {k: 0.0 for k in coeffs.moment_exprs}
    table = {}

    def edge(node, j):
        key = (node, j)
        if key not in table:
            mid = q.xi + np.array(node) * step
            mid[j] += 0.5 * step[j]
            y = q.x + gamma @ (mid - q.xi)
            env = {k: np.array(v) for k, v in mom.items()}
            c = coeffs.eval_c(q.t, env, y, mid)
            table[key] = float(c[j] * step[j])
        return table[key]

    # a lower bound on any remaining edge keeps the pruning valid for negative costs
    emin = min(0.0, min(edge(node, j) for node in itertools.product(range(G + 1), repeat=l)
                        for j in active if node[j] < G))
    best = math.inf
    moves = [j for j in active for _ in range(G)]
    n_moves = len(moves)
    for order in _multiset_permutations(moves):
        node = [0] * l
        total = 0.0
        for done, j in enumerate(order):
            total += edge(tuple(node), j)
            if total + (n_moves - done - 1) * emin >= best:
                break
            node[j] += 1
        else:
            best = min(best, total)
    return best


def _multiset_permutations(items):
    items = sorted(items)
    counts = {}
    for it in items:
        counts[it] = counts.get(it, 0) + 1
    keys = sorted(counts)
    n = len(items)
    out = [None] * n

    def rec(pos):
        if pos == n:
            yield tuple(out)
            return
        for k in keys:
            if counts[k]:
                counts[k] -= 1
                out[pos] = k
                yield from rec(pos + 1)
                counts[k] += 1

    yield from rec(0)


# --------------------------------------------------------------------------
# distributional

class _ScheduleObjective:
    """Cost of schedules (positions of all particles on the lambda grid)."""

    def __init__(self, coeffs, t, x0, z0, sub):
        self.coeffs = coeffs
        self.t = float(t)
        self.x0 = np.asarray(x0, dtype=float)       # (N, d)
        self.z0 = np.asarray(z0, dtype=float)       # (N, l)
        self.gamma = coeffs.eval_gamma(self.t)
        self.sub = int(sub)
        self.N = len(self.x0)

    def step_cost(self, a, b):
        """Cost of moving every particle from ``a`` to ``b`` (shape ``(..., N, l)``)."""
        tau = (np.arange(self.sub) + 0.5) / self.sub
        a = np.asarray(a)[..., None, :, :]
        b = np.asarray(b)[..., None, :, :]
        pos = a + tau[:, None, None] * (b - a)                # (..., sub, N, l)
        Y = self.x0 + (pos - self.z0) @ self.gamma.T
        mom = self.coeffs.moments(Y, pos, keepdims=True)
        c = self.coeffs.eval_c(self.t, mom, Y, pos)
        dz = (b - a) / self.sub
        out = (c * dz).sum(axis=(-1, -2, -3)) / self.N
        if not np.all(np.isfinite(out)):
            raise NonFiniteCostError("cost evaluated to a non-finite value along the schedule")
        return out

    def __call__(self, P):
        """``P``: positions with shape ``(..., N, S + 1, l)``."""
        P = np.asarray(P, dtype=float)
        a = np.moveaxis(P[..., :, :-1, :], -2, 0)
        b = np.moveaxis(P[..., :, 1:, :], -2, 0)
        return self.step_cost(a, b).sum(axis=0)


def _check_paired(before, after, coeffs, t, tol=1e-9):
    if before.N != after.N or (before.d, before.l) != (after.d, after.l):
        raise JumpCostError("paired ensembles must have the same shape")
    dz = after.xi - before.xi
    if np.any(dz < -tol):
        raise JumpCostError("infeasible pairing: some control decreases")
    gamma = coeffs.eval_gamma(float(t))
    resid = after.x - before.x - dz @ gamma.T
    if np.any(np.abs(resid) > 1e-6 * (1 + np.abs(after.x))):
        raise JumpCostError("paired states are not related by the jump direction")
    return np.maximum(dz, 0.0)


def distributional_jump_cost(t, before, after, coeffs, M=64, lambda_steps=16, restarts=2, seed=0,
                             quanta=None, max_sweeps=50, tol=1e-8, max_rounds=40):
    """Minimal averaged cost of a joint schedule moving ``before[i]`` to ``after[i]``."""
    delta = _check_paired(before, after, coeffs, t)
    N, l = delta.shape
    S = int(lambda_steps)
    if S < 1:
        raise JumpCostError("lambda_steps must be positive")
    sub = max(1, math.ceil(M / S))
    lam = np.linspace(0.0, 1.0, S + 1)

    if not coeffs.c_depends_on_measure() or N == 1:
        total = 0.0
        alloc = np.zeros((N, S, l))
        mf = _self_moments(coeffs) if N == 1 else None
        per = []
        for i in range(N):
            if delta[i].sum() == 0:
                per.append(0.0)
                continue
            q = PathwiseJumpQuery(t, before.x[i], before.xi[i], after.xi[i], m=before)
            r = pathwise_jump_cost(q, coeffs, M=M, restarts=restarts, seed=seed, max_rounds=max_rounds,
                                   moments_fn=mf)
            total += r.value
            per.append(r.value)
            h = constant_speed_reparametrisation(r.path)
            alloc[i] = np.maximum(np.diff(h(lam), axis=0), 0.0)
        sched = Schedule(before.xi.copy(), alloc)
        return JumpCostResult(total / N, schedule=sched,
                              diagnostics={"route": "pathwise", "per_particle": per})

    obj = _ScheduleObjective(coeffs, t, before.x, before.xi, sub)
    Q = int(quanta) if quanta is not None else (S if l == 1 else 4)
    unit = delta / Q                                                  # (N, l)
    straight = before.xi[:, None, :] + lam[None, :, None] * delta[:, None, :]
    straight_val = float(obj(straight))
    rng = np.random.default_rng(seed)
    states = np.array(list(itertools.product(range(Q + 1), repeat=l)))
    trans = [(a, b) for a in range(len(states)) for b in range(len(states))
             if np.all(states[b] >= states[a])]
    ta = np.array([a for a, _ in trans])
    tb = np.array([b for _, b in trans])

    def counts_to_pos(C):
        return before.xi[:, None, :] + C * unit[:, None, :]

    def straight_counts():
        C = np.rint(lam[None, :, None] * Q * np.ones((N, 1, l))).astype(int)
        return C

    def random_counts():
        C = np.zeros((N, S + 1, l), dtype=int)
        for i in range(N):
            for j in range(l):
                cuts = np.sort(rng.integers(0, Q + 1, size=S - 1))
                C[i, 1:S, j] = cuts
                C[i, S, j] = Q
        return C

    def block_solve(C, i):
        # exact DP over particle i's lattice schedule with the others frozen
        P = counts_to_pos(C)
        n_states = len(states)
        V = np.full(n_states, np.inf)
        V[0] = 0.0
        back = np.zeros((S, n_states), dtype=int)
        for k in range(S):
            a = np.broadcast_to(P[:, k, :], (len(trans), N, l)).copy()
            b = np.broadcast_to(P[:, k + 1, :], (len(trans), N, l)).copy()
            a[:, i, :] = before.xi[i] + states[ta] * unit[i]
            b[:, i, :] = before.xi[i] + states[tb] * unit[i]
            cost = obj.step_cost(a, b)
            nv = np.full(n_states, np.inf)
            cand = V[ta] + cost
            for idx in np.argsort(tb, kind="stable"):
                s_to = tb[idx]
                if cand[idx] < nv[s_to] - TIE_TOL:
                    nv[s_to] = cand[idx]
                    back[k, s_to] = ta[idx]
            V = nv
        path = [n_states - 1]
        for k in range(S - 1, -1, -1):
            path.append(back[k, path[-1]])
        path = path[::-1]
        C = C.copy()
        C[i] = states[path]
        return C

    def objective(C):
        return float(obj(counts_to_pos(C)))

    def joint_solve():
        # exact DP over the product lattice of all particles
        per = len(trans)
        jt = np.array(list(itertools.product(range(per), repeat=N)))          # (T, N)
        n_states = len(states)
        code = n_states ** np.arange(N)[::-1]
        ja = (ta[jt] * code).sum(axis=1)
        jb = (tb[jt] * code).sum(axis=1)
        sa = states[ta[jt]]                                                 # (T, N, l)
        sb = states[tb[jt]]
        a = before.xi + sa * unit
        b = before.xi + sb * unit
        cost = obj.step_cost(a, b)                                          # same for every step
        n_joint = n_states ** N
        V = np.full(n_joint, np.inf)
        V[0] = 0.0
        back = np.zeros((S, n_joint), dtype=int)
        idx = np.arange(len(jb))
        for k in range(S):
            cand = V[ja] + cost
            # per target: smallest candidate, earliest transition on ties
            o = np.lexsort((idx, cand, jb))
            first = np.ones(len(o), dtype=bool)
            first[1:] = jb[o][1:] != jb[o][:-1]
            win = o[first]
            nv = np.full(n_joint, np.inf)
            nv[jb[win]] = cand[win]
            back[k, jb[win]] = ja[win]
            V = nv
        path = [n_joint - 1]
        for k in range(S - 1, -1, -1):
            path.append(back[k, path[-1]])
        path = np.array(path[::-1])
        digits = (path[:, None] // code[None, :]) % n_states                # (S + 1, N)
        return np.transpose(states[digits], (1, 0, 2))

    best_val, best_C, sweeps_total = np.inf, None, 0
    if len(trans) ** N <= JOINT_TRANSITION_LIMIT:
        C = joint_solve()
        P = counts_to_pos(C)
        val = objective(C)
        route = "joint-dp"
        if straight_val < val - TIE_TOL:
            P, val, route = straight, straight_val, "straight"
        sched = Schedule(before.xi.copy(), np.maximum(np.diff(P, axis=1), 0.0))
        return JumpCostResult(val, schedule=sched,
                              diagnostics={"route": route, "sweeps": 0, "quanta": Q,
                                           "sub_steps": sub, "straight_value": straight_val})
    starts = [straight_counts()] + [random_counts() for _ in range(restarts)]
    for C in starts:
        val = objective(C)
        for sweep in range(max_sweeps):
            order = rng.permutation(N)
            for i in order:
                C = block_solve(C, i)
            new = objective(C)
            sweeps_total += 1
            improved = val - new
            val = new
            if improved < tol:
                break
        if val < best_val - TIE_TOL or (abs(val - best_val) <= TIE_TOL and best_C is not None
                                        and tuple(C.ravel()) < tuple(best_C.ravel())):
            best_val, best_C = val, C
    if straight_val < best_val - TIE_TOL:
        P = straight
        best_val = straight_val
        route = "straight"
    else:
        P = counts_to_pos(best_C)
        route = "block-coordinate"
    sched = Schedule(before.xi.copy(), np.maximum(np.diff(P, axis=1), 0.0))
    return JumpCostResult(best_val, schedule=sched,
                          diagnostics={"route": route, "sweeps": sweeps_total, "quanta": Q,
                                       "sub_steps": sub, "straight_value": straight_val})


def schedule_enumeration_oracle(t, before, after, coeffs, steps=4, quanta=None, sub=1, limit=2_000_000):
    """Exhaustive minimum over lattice schedules: each particle and component moves in
    ``quanta`` equal units spread over ``steps`` lambda-steps.

    Positions are linear inside a lambda-step, which is split into ``sub``
    midpoint cells; the measure at a cell midpoint holds every particle at its
    own midpoint.
    """
    delta = np.asarray(after.xi - before.xi, dtype=float)
    if np.any(delta < -1e-12):
        raise JumpCostError("jump target must dominate the start componentwise")
    N, l = delta.shape
    S = int(steps)
    Q = int(quanta) if quanta is not None else S
    gamma = coeffs.eval_gamma(float(t))
    seqs = [c for c in itertools.combinations_with_replacement(range(Q + 1), S - 1)]
    per_comp = [np.array((0,) + c + (Q,)) for c in seqs]
    n_total = len(per_comp) ** (N * l)
    if n_total > limit:
        raise JumpCostError(f"{n_total} schedules exceed the budget of {limit}")
    unit = delta / Q
    best = math.inf
    for combo in itertools.product(range(len(per_comp)), repeat=N * l):
        counts = np.array([per_comp[c] for c in combo]).reshape(N, l, S + 1)
        pos = before.xi[:, :, None] + counts * unit[:, :, None]          # (N, l, S + 1)
        total = 0.0
        for k in range(S):
            for r in range(sub):
                a = pos[:, :, k] + (pos[:, :, k + 1] - pos[:, :, k]) * (r / sub)
                b = pos[:, :, k] + (pos[:, :, k + 1] - pos[:, :, k]) * ((r + 1) / sub)
                mid = 0.5 * (a + b)
                ys = before.x + (mid - before.xi) @ gamma.T
                mom = {key: np.array(v) for key, v in coeffs.moments(ys, mid, keepdims=False).items()}
                for i in range(N):
                    c = coeffs.eval_c(float(t), mom, ys[i], mid[i])
                    total += float(np.dot(c, b[i] - a[i]))
        best = min(best, total / N)
    return best


def schedule_cost(t, before, coeffs, schedule, M=64):
    """Objective of a given schedule (same quadrature as the optimizer)."""
    S = schedule.alloc.shape[1]
    obj = _ScheduleObjective(coeffs, t, before.x, before.xi, max(1, math.ceil(M / S)))
    return float(obj(schedule.positions))


# --------------------------------------------------------------------------
# couplings

def feasible_pairs(t, m, m_new, coeffs, tol=1e-9):
    """Boolean matrix: atom ``i`` of ``m`` can jump onto atom ``j`` of ``m_new``."""
    gamma = coeffs.eval_gamma(float(t))
    dz = m_new.xi[None, :, :] - m.xi[:, None, :]
    mono = np.all(dz >= -tol, axis=2)
    dx = m_new.x[None, :, :] - m.x[:, None, :] - dz @ gamma.T
    return mono & np.all(np.abs(dx) <= tol, axis=2)


def is_reachable(t, m, m_new, coeffs, tol=1e-9):
    if m.N != m_new.N:
        raise ValueError("measures must have the same number of atoms")
    ok = feasible_pairs(t, m, m_new, coeffs, tol)
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return bool(np.all(match >= 0))


def measure_jump_cost(t, m, m_new, coeffs, search_budget=200, seed=0, exact_limit=6, **kw):
    """Minimal distributional cost over permutation couplings from ``m`` to ``m_new``."""
    if not is_reachable(t, m, m_new, coeffs):
        raise JumpCostError("target measure is not reachable by a jump")
    ok = feasible_pairs(t, m, m_new, coeffs)
    N = m.N

    def cost(perm):
        return distributional_jump_cost(t, m, m_new.permuted(perm), coeffs, seed=seed, **kw)

    if N <= exact_limit:
        best = None
        n = 0
        for cp in _enumerate(ok):
            r = cost(cp.perm)
            n += 1
            if best is None or r.value < best[0].value - TIE_TOL or (
                    abs(r.value - best[0].value) <= TIE_TOL and cp.perm < best[1]):
                best = (r, cp.perm)
        r, perm = best
        r.coupling = tuple(perm)
        r.diagnostics.update({"search": "exact", "couplings": n})
        return r

    # seed with an assignment on straight-line costs, then improve by 2-swaps
    M = kw.get("M", 64)
    pair = np.full((N, N), 1e30)
    for i, j in zip(*np.nonzero(ok)):
        q = PathwiseJumpQuery(t, m.x[i], m.xi[i], m_new.xi[j], m=m)
        pair[i, j] = straight_line_cost(q, coeffs, M=M)
    rows, cols = linear_sum_assignment(pair)
    perm = np.empty(N, dtype=int)
    perm[rows] = cols
    best = cost(tuple(perm))
    used = 1
    rng = np.random.default_rng(seed)
    improved = True
    while improved and used < search_budget:
        improved = False
        pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
        for idx in rng.permutation(len(pairs)):
            if used >= search_budget:
                break
            i, j = pairs[idx]
            if not (ok[i, perm[j]] and ok[j, perm[i]]):
                continue
            trial = perm.copy()
            trial[i], trial[j] = perm[j], perm[i]
            r = cost(tuple(trial))
            used += 1
            if r.value < best.value - 1e-12:
                perm, best, improved = trial, r, True
    best.coupling = tuple(int(p) for p in perm)
    best.diagnostics.update({"search": "assignment+2swap", "evaluations": used,
                             "budget_exhausted": used >= search_budget})
    return best
