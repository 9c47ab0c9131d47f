"""Equal-weight empirical measures, exact W2 by assignment, couplings and flows."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

MAX_ASSIGNMENT_N = 512


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """``N`` equally weighted atoms ``(x_i, xi_i)`` in ``R^(d+l)``."""

    points: np.ndarray
    d: int
    l: int

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[1] != self.d + self.l:
            raise ValueError(f"points need {self.d + self.l} coordinates, got {pts.shape[1]}")
        if len(pts) < 1:
            raise ValueError("an empirical measure needs at least one atom")
        if not np.all(np.isfinite(pts)):
            raise ValueError("coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_xy(cls, x, xi):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if x.shape[0] != xi.shape[0]:
            x, xi = x.T, xi.T
        return cls(np.concatenate([x, xi], axis=1), x.shape[1], xi.shape[1])

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def x(self):
        return self.points[:, :self.d]

    @property
    def xi(self):
        return self.points[:, self.d:]

    def moments(self, coeffs):
        return coeffs.moments(self.x, self.xi, keepdims=False)

    def permuted(self, perm):
        return EmpiricalMeasure(self.points[np.asarray(perm)], self.d, self.l)

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"# N d l\n{self.N} {self.d} {self.l}\n")
        for row in self.points:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        N, d, l = (int(v) for v in rows[0])
        pts = np.array([[float(v) for v in r] for r in rows[1:]])
        if pts.shape != (N, d + l):
            raise ValueError("ensemble rows do not match the header")
        return cls(pts, d, l)


@dataclass(frozen=True)
class Coupling:
    """Permutation coupling: atom ``i`` of the source goes to atom ``perm[i]`` of the target."""

    perm: tuple

    @property
    def N(self):
        return len(self.perm)

    def matrix(self):
        P = np.zeros((self.N, self.N))
        P[np.arange(self.N), list(self.perm)] = 1.0 / self.N
        return P

    @property
    def is_permutation(self):
        return True


def _check_pair(a, b):
    if (a.d, a.l) != (b.d, b.l):
        raise ValueError("dimension mismatch between measures")
    if a.N != b.N:
        raise ValueError("measures must have the same number of atoms")
    if a.N > MAX_ASSIGNMENT_N:
        raise ValueError(f"at most {MAX_ASSIGNMENT_N} atoms supported")


def optimal_assignment(a, b):
    """Optimal permutation for squared Euclidean cost and its mean cost."""
    _check_pair(a, b)
    cost = cdist(a.points, b.points, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(a.N, dtype=int)
    perm[rows] = cols
    return perm, float(cost[rows, cols].mean())


def wasserstein2(a, b):
    if a.points.shape == b.points.shape and np.array_equal(a.points, b.points):
        return 0.0
    return float(np.sqrt(max(optimal_assignment(a, b)[1], 0.0)))


def coupling_cost(a, b, coupling):
    """Mean squared displacement under ``coupling``."""
    disp = a.points - b.points[list(coupling.perm)]
    return float((disp ** 2).sum(axis=1).mean())


def enumerate_monotone_couplings(a, b, tol=1e-12):
    """Yield every permutation coupling with ``xi'_{perm(i)} >= xi_i`` componentwise."""
    _check_pair(a, b)
    ok = np.all(b.xi[None, :, :] >= a.xi[:, None, :] - tol, axis=2)
    yield from _enumerate(ok)


def _enumerate(ok):
    N = ok.shape[0]
    perm = [0] * N
    used = [False] * N
    # most constrained rows first keeps the search small; output is mapped back
    order = sorted(range(N), key=lambda i: ok[i].sum())

    def rec(pos):
        if pos == N:
            yield Coupling(tuple(perm))
            return
        i = order[pos]
        for j in np.flatnonzero(ok[i]):
            if not used[j]:
                used[j] = True
                perm[i] = int(j)
                yield from rec(pos + 1)
                used[j] = False

    if np.all(ok.any(axis=1)) and np.all(ok.any(axis=0)):
        yield from rec(0)


# --------------------------------------------------------------------------
# flows

@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Ensembles on a time grid with left (pre-jump) and right values per stamp.

    ``left`` and ``right`` have shape ``(n_stamps, N, d + l)``.
    """

    grid: np.ndarray
    left: np.ndarray
    right: np.ndarray
    d: int
    l: int

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        left = np.asarray(self.left, dtype=float)
        right = np.asarray(self.right, dtype=float)
        if left.shape != right.shape or left.shape[0] != len(grid) or left.shape[2] != self.d + self.l:
            raise ValueError("flow arrays have inconsistent shapes")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def N(self):
        return self.left.shape[1]

    def at(self, k, side="right"):
        arr = self.right if side == "right" else self.left
        return EmpiricalMeasure(arr[k], self.d, self.l)

    def jump_gaps(self):
        """W2 distance between left and right ensembles at every stamp."""
        gaps = np.zeros(len(self.grid))
        for k in range(len(self.grid)):
            if not np.array_equal(self.left[k], self.right[k]):
                gaps[k] = wasserstein2(self.at(k, "left"), self.at(k, "right"))
        return gaps

    def xi_range(self):
        xi = np.concatenate([self.left[..., self.d:], self.right[..., self.d:]])
        return float(xi.max() - xi.min()) if xi.size else 0.0


def default_eta_meas(N, xi_range):
    """Threshold separating single-particle jumps from macroscopic ones."""
    return 0.5 / np.sqrt(N) * max(float(xi_range), 1e-12)


def classify_jump_times(flow, eta_meas=None):
    """Split stamp indices into (macroscopic jumps, the rest)."""
    if eta_meas is None:
        eta_meas = default_eta_meas(flow.N, flow.xi_range())
    gaps = flow.jump_gaps()
    jd = np.flatnonzero(gaps > eta_meas)
    jc = np.flatnonzero(~(gaps > eta_meas))
    return jd, jc
