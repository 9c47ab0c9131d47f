"""Piecewise-linear cadlag paths, monotone controls and continuous time changes.

A :class:`CadlagPath` is stored on stamps ``grid[0] < ... < grid[n-1]`` with a
left limit and a value (right value) at every stamp.  Between stamps the path
is linear from ``right[i]`` to ``left[i+1]``; a stamp is a jump when the two
differ.  ``left[0]`` doubles as the pre-initial value (the value just before
the horizon starts).
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

VALUE_TOL = 1e-12
GEOM_TOL = 1e-9


class DomainError(ValueError):
    pass


def _as2d(a, n=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if n is not None and a.shape[0] != n:
        raise ValueError(f"expected {n} rows, got {a.shape[0]}")
    return a


@dataclass(frozen=True, eq=False)
class CadlagPath:
    grid: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or len(grid) < 1:
            raise ValueError("grid must be a non-empty 1-d array")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        left = _as2d(self.left, len(grid))
        right = _as2d(self.right, len(grid))
        if left.shape != right.shape:
            raise ValueError("left and right values must have the same shape")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise ValueError("path values must be finite")
        for name, arr in (("grid", grid), ("left", left), ("right", right)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- constructors --------------------------------------------------
    @classmethod
    def continuous(cls, grid, values):
        values = _as2d(values)
        return cls(grid, values, values)

    @classmethod
    def from_steps(cls, grid, left, right):
        return cls(grid, left, right)

    # -- basic accessors ------------------------------------------------
    @property
    def k(self):
        return self.left.shape[1]

    @property
    def t0(self):
        return self.grid[0]

    @property
    def T(self):
        return self.grid[-1]

    @property
    def pre_initial_value(self):
        return self.left[0]

    @property
    def terminal_value(self):
        return self.right[-1]

    def jump_sizes(self):
        return self.right - self.left

    def jump_indices(self, tol=VALUE_TOL):
        return np.flatnonzero(np.max(np.abs(self.right - self.left), axis=1) > tol)

    def jump_times(self, tol=VALUE_TOL):
        return self.grid[self.jump_indices(tol)]

    def is_continuous(self, tol=VALUE_TOL):
        return len(self.jump_indices(tol)) == 0

    # -- evaluation ----------------------------------------------------
    def _locate(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if np.any(s < self.grid[0] - VALUE_TOL) or np.any(s > self.grid[-1] + VALUE_TOL):
            raise DomainError("query outside the path domain")
        return s

    def __call__(self, s):
        """Right-continuous value at time(s) ``s``."""
        s = self._locate(s)
        g = self.grid
        i = np.clip(np.searchsorted(g, s, side="right") - 1, 0, len(g) - 1)
        out = self.right[i].copy()
        inner = i < len(g) - 1
        if np.any(inner):
            ii = i[inner]
            w = (s[inner] - g[ii]) / (g[ii + 1] - g[ii])
            out[inner] = self.right[ii] + w[:, None] * (self.left[ii + 1] - self.right[ii])
        return out

    def left_limit(self, s):
        """Left limit at time(s) ``s`` (the pre-initial value at ``grid[0]``)."""
        s = self._locate(s)
        g = self.grid
        i = np.searchsorted(g, s, side="left")
        out = np.empty((len(s), self.k))
        at = (i < len(g)) & (g[np.minimum(i, len(g) - 1)] == s)
        out[at] = self.left[i[at]]
        rest = ~at
        if np.any(rest):
            out[rest] = self(s[rest])
        return out

    # -- transforms ----------------------------------------------------
    def restrict(self, a, b):
        """Path on ``[a, b]``; the left limit at ``a`` is kept as pre-initial value."""
        if not a < b:
            raise DomainError("empty interval")
        inner = self.grid[(self.grid > a) & (self.grid < b)]
        grid = np.concatenate([[a], inner, [b]])
        left = self.left_limit(grid)
        right = self(grid)
        return CadlagPath(grid, left, right)

    def refine(self, extra):
        """Same path on ``grid`` merged with ``extra`` stamps."""
        grid = np.union1d(self.grid, np.asarray(extra, dtype=float))
        grid = grid[(grid >= self.grid[0]) & (grid <= self.grid[-1])]
        return CadlagPath(grid, self.left_limit(grid), self(grid))

    def shift_values(self, offset):
        return CadlagPath(self.grid, self.left + offset, self.right + offset)

    # -- text format ---------------------------------------------------
    def to_text(self):
        buf = io.StringIO()
        buf.write(f"# k t0 T\n{self.k} {self.grid[0]!r} {self.grid[-1]!r}\n")
        buf.write("# stamp left... right...\n")
        for t, lft, rgt in zip(self.grid, self.left, self.right):
            buf.write(" ".join(repr(float(v)) for v in (t, *lft, *rgt)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        k = int(rows[0][0])
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        if data.shape[1] != 1 + 2 * k:
            raise ValueError("row width does not match k")
        return cls(data[:, 0], data[:, 1:1 + k], data[:, 1 + k:])


class MonotoneControlPath(CadlagPath):
    """Cadlag path that is componentwise non-decreasing, jumps included."""

    def __post_init__(self):
        super().__post_init__()
        check_monotone(self)


def check_monotone(path, tol=VALUE_TOL):
    if np.any(path.right - path.left < -tol):
        raise ValueError("control decreases across a jump")
    if np.any(path.left[1:] - path.right[:-1] < -tol):
        raise ValueError("control decreases between stamps")
    return path


# --------------------------------------------------------------------------
# time changes

@dataclass(frozen=True, eq=False)
class TimeChange:
    """Continuous non-decreasing piecewise-linear map on ``grid``."""

    grid: np.ndarray
    values: np.ndarray
    lipschitz_bound: float | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.shape != values.shape or grid.ndim != 1 or len(grid) < 2:
            raise ValueError("grid and values must be 1-d arrays of equal length >= 2")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("time-change grid must be strictly increasing")
        if np.any(np.diff(values) < -VALUE_TOL):
            raise ValueError("time change must be non-decreasing")
        values = np.maximum.accumulate(values)
        if self.lipschitz_bound is not None:
            slopes = np.diff(values) / np.diff(grid)
            if np.any(slopes > self.lipschitz_bound * (1 + GEOM_TOL) + GEOM_TOL):
                raise ValueError(f"chord slope {slopes.max():.6g} exceeds bound {self.lipschitz_bound:.6g}")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def affine(cls, a, b, lo=0.0, hi=1.0):
        return cls(np.array([lo, hi]), np.array([a, b]))

    @property
    def domain(self):
        return self.grid[0], self.grid[-1]

    @property
    def range(self):
        return self.values[0], self.values[-1]

    def __call__(self, u):
        return np.interp(u, self.grid, self.values)

    def slopes(self):
        return np.diff(self.values) / np.diff(self.grid)

    def max_slope(self):
        return float(self.slopes().max())

    def inverse(self, query):
        """``inf{u : tc(u) > query}`` capped at the domain end."""
        return right_continuous_inverse(self, query)

    def inverse_path(self):
        """The right-continuous inverse as a cadlag path on the range.

        Flat stretches of the time change become jumps of the inverse.
        """
        v, g = self.values, self.grid
        levels, first = np.unique(v, return_index=True)
        last = len(v) - 1 - np.unique(v[::-1], return_index=True)[1]
        if len(levels) == 1:
            raise DomainError("constant time change has no inverse path")
        return CadlagPath(levels, g[first], g[last])

    def compose(self, inner):
        """``u -> self(inner(u))`` for a continuous inner time change."""
        lo, hi = self.domain
        if inner.values[0] < lo - GEOM_TOL or inner.values[-1] > hi + GEOM_TOL:
            raise DomainError("inner time change leaves the outer domain")
        pre = _preimages(inner, self.grid)
        grid = np.union1d(inner.grid, pre)
        return TimeChange(grid, self(inner(grid)))


def right_continuous_inverse(tc, query):
    q = np.asarray(query, dtype=float)
    scalar = q.ndim == 0
    q = np.atleast_1d(q)
    lo, hi = tc.range
    if np.any(q < lo - VALUE_TOL) or np.any(q > hi + VALUE_TOL):
        raise DomainError("query outside the range of the time change")
    v, g = tc.values, tc.grid
    idx = np.searchsorted(v, q, side="right")
    out = np.full(len(q), g[-1])
    inner = (idx > 0) & (idx < len(v))
    j = idx[inner]
    w = (q[inner] - v[j - 1]) / (v[j] - v[j - 1])
    out[inner] = g[j - 1] + w * (g[j] - g[j - 1])
    # queries strictly below the first value cannot happen after the range check
    # except by rounding; they map to the domain start
    out[idx == 0] = g[0]
    return out[0] if scalar else out


def _preimages(tc, levels):
    """All ``u`` where the piecewise-linear ``tc`` crosses or touches ``levels``."""
    out = []
    v, g = tc.values, tc.grid
    for s in np.atleast_1d(levels):
        if s < v[0] - VALUE_TOL or s > v[-1] + VALUE_TOL:
            continue
        j = np.searchsorted(v, s, side="left")
        k = np.searchsorted(v, s, side="right")
        if k > j:
            out.extend(g[j:k])
        else:
            if 0 < j < len(v):
                w = (s - v[j - 1]) / (v[j] - v[j - 1])
                out.append(g[j - 1] + w * (g[j] - g[j - 1]))
    return np.unique(np.asarray(out, dtype=float))


# --------------------------------------------------------------------------
# variation and reparametrisation

def total_variation(path, a=None, b=None, include_left_jump=False):
    """Variation of ``path`` over ``(a, b]`` per component and its l1 sum.

    With ``include_left_jump`` the jump at ``a`` is counted as well, i.e. the
    interval is ``[a, b]`` measured from the left limit at ``a``.
    """
    a = path.grid[0] if a is None else a
    b = path.grid[-1] if b is None else b
    if b <= a:
        z = np.zeros(path.k)
        if include_left_jump and a == b:
            z = np.abs(path(a)[0] - path.left_limit(a)[0])
        return z, float(z.sum())
    p = path.restrict(a, b)
    pieces = np.abs(p.left[1:] - p.right[:-1]).sum(axis=0)
    jumps = np.abs(p.right[1:] - p.left[1:]).sum(axis=0)
    per = pieces + jumps
    if include_left_jump:
        per = per + np.abs(p.right[0] - p.left[0])
    return per, float(per.sum())


def cumulative_variation(path):
    """l1 variation from the pre-initial value up to each stamp: (left, right)."""
    seg = np.concatenate([[0.0], np.abs(path.left[1:] - path.right[:-1]).sum(axis=1)])
    jmp = np.abs(path.right - path.left).sum(axis=1)
    right = np.cumsum(seg + jmp)
    left = right - jmp
    return left, right


def reparametrise(path, tc, open_jumps=False):
    """The path ``u -> path(tc(u))`` on the domain of ``tc``.

    A jump at a level where ``tc`` is strictly increasing stays a jump.  Where
    ``tc`` is flat at a jump level the composite jumps at the start of the flat
    stretch, unless ``open_jumps`` is set, in which case the jump is spread
    linearly across the flat stretch.
    """
    lo, hi = tc.range
    if lo < path.grid[0] - GEOM_TOL or hi > path.grid[-1] + GEOM_TOL:
        raise DomainError("time change range exceeds the path domain")
    u = np.union1d(tc.grid, _preimages(tc, path.grid))
    s = np.clip(tc(u), path.grid[0], path.grid[-1])
    # preimages of path stamps come back with rounding error; snap them so jumps are not lost
    j = np.clip(np.searchsorted(path.grid, s), 1, len(path.grid) - 1) if len(path.grid) > 1 else np.zeros(len(s), int)
    for cand in (j - 1, j):
        near = np.abs(path.grid[cand] - s) <= GEOM_TOL * max(1.0, float(np.abs(path.grid).max()))
        s[near] = path.grid[cand[near]]
    right = path(s)
    left = right.copy()
    # left limits: where tc is increasing into u, take the path's left limit
    incr_before = np.concatenate([[True], np.diff(s) > 0])
    left[incr_before] = path.left_limit(s[incr_before])
    left[0] = path.left_limit(s[:1])[0]
    if open_jumps:
        flat = np.diff(s) == 0
        i = 0
        n = len(u)
        while i < n - 1:
            if not flat[i]:
                i += 1
                continue
            j = i
            while j < n - 1 and flat[j]:
                j += 1
            a_val = path.left_limit(s[i:i + 1])[0]
            b_val = path(s[i:i + 1])[0]
            if np.any(np.abs(b_val - a_val) > VALUE_TOL):
                w = (u[i:j + 1] - u[i]) / (u[j] - u[i])
                vals = a_val + w[:, None] * (b_val - a_val)
                # left[i] already holds the left limit a_val
                right[i:j + 1] = vals
                left[i + 1:j + 1] = vals[1:]
            i = j
    return CadlagPath(u, left, right)


def constant_speed_reparametrisation(values, tol=GEOM_TOL):
    """Reparametrise a monotone polyline by normalised l1 arclength on ``[0, 1]``.

    ``values`` are the polyline vertices from start to end.  Returns a
    continuous :class:`CadlagPath` on ``[0, 1]`` with ``|h(lam) - h(0)|_1 =
    lam |h(1) - h(0)|_1``.
    """
    v = _as2d(values)
    inc = np.diff(v, axis=0)
    if np.any(inc < -tol):
        raise ValueError("input path is not monotone")
    inc = np.maximum(inc, 0.0)
    step = inc.sum(axis=1)
    keep = np.concatenate([[True], step > 0])
    v = v[keep]
    length = step.sum()
    if length <= 0 or len(v) < 2:
        return CadlagPath.continuous([0.0, 1.0], np.vstack([v[0], v[0]]))
    lam = np.concatenate([[0.0], np.cumsum(step[step > 0])]) / length
    lam[-1] = 1.0
    return CadlagPath.continuous(lam, v)


def sample(path, n):
    """Sample ``n`` equispaced right values (useful for plotting and checks)."""
    s = np.linspace(path.grid[0], path.grid[-1], n)
    return s, path(s)
