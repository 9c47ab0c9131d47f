"""Model coefficients and scenario files.

A scenario file is line oriented::

    # comment
    [dims]
    d = 1
    l = 1
    m = 1

    [moments]
    mean_xi = "xi"

    [coefficients]
    b = "0"                 # vector of length d, or a bare string when d == 1
    sigma = "0"             # d x m matrix, nested lists, or bare when d == m == 1
    gamma = "1"             # d x l matrix, depends on t only
    f = "0"
    g = "min(xi, 1)"
    c = "1"                 # row of length l

    [discretization]
    t0 = 0.0
    T = 1.0
    steps = 100
    particles = 10

    [initial]
    points = [[0.0, 0.0]]   # rows (x..., xi...)

Values are Python literals (numbers, quoted strings, lists).  Measure
dependence enters only through the declared moments: ``name = "phi"``
declares the moment ``mean over particles of phi(x, xi)``.
"""
from __future__ import annotations

import ast
import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .expr import Expression, ExprSyntaxError

SECTIONS = ("dims", "moments", "coefficients", "discretization", "thresholds", "initial")
# extra sections carried through untouched for subcommand-specific input
EXTRA_SECTIONS = ("query", "policy", "functional", "run")


class ScenarioError(ValueError):
    """Validation or syntax error in a scenario file."""

    def __init__(self, message, line=None, col=None):
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {col}" if col is not None else "") + ": "
        super().__init__(where + message)
        self.line = line
        self.col = col


# --------------------------------------------------------------------------
# coefficients

class Coefficients:
    """Evaluable model functions b, sigma, gamma, f, g, c plus moment functionals.

    All evaluators are vectorised: ``x`` has shape ``(..., d)``, ``xi`` shape
    ``(..., l)``; moments are passed as a dict of arrays broadcastable to
    ``x.shape[:-1]`` (see :meth:`moments`).
    """

    def __init__(self, d, l, m_bm, b, sigma, gamma, f, g, c, moments=None):
        self.d, self.l, self.m_bm = int(d), int(l), int(m_bm)
        self.moment_exprs = dict(moments or {})
        names = self.names()
        point = {"x": self.d, "xi": self.l}

        def comp(src, allowed, what):
            if isinstance(src, Expression):
                src = src.source
            try:
                e = Expression(str(src), {k: v for k, v in names.items() if k in allowed})
            except ExprSyntaxError as err:
                raise ScenarioError(f"{what}: {err}") from err
            return e

        for k, src in list(self.moment_exprs.items()):
            self.moment_exprs[k] = comp(src, point, f"moment {k}")
        full = set(names)
        no_m = {"t", "x", "xi"}
        self.b = [comp(s, full, "b") for s in _as_list(b, self.d, "b")]
        self.sigma = [[comp(s, no_m, "sigma") for s in row]
                      for row in _as_matrix(sigma, self.d, self.m_bm, "sigma")]
        self.gamma = [[comp(s, {"t"}, "gamma") for s in row]
                      for row in _as_matrix(gamma, self.d, self.l, "gamma")]
        self.f = comp(f, full, "f")
        self.g = comp(g, full - {"t"}, "g")
        self.c = [comp(s, full, "c") for s in _as_list(c, self.l, "c")]

    def names(self):
        out = {"t": None, "x": self.d, "xi": self.l}
        for k in self.moment_exprs:
            if k in out:
                raise ScenarioError(f"moment name {k!r} clashes with a reserved identifier")
            out[k] = None
        return out

    # ------------------------------------------------------------------
    def moments(self, x, xi, keepdims=True):
        """Moment values of the empirical measure(s) over the particle axis (-2)."""
        env = {"x": x, "xi": xi}
        shape = x.shape[:-1]
        out = {}
        for k, e in self.moment_exprs.items():
            val = e(env, shape).mean(axis=-1)
            out[k] = val[..., None] if keepdims else val
        return out

    def _env(self, t, mom, x, xi):
        env = {"t": t, "x": x, "xi": xi}
        if mom:
            env.update(mom)
        return env

    def eval_b(self, t, mom, x, xi):
        env = self._env(t, mom, x, xi)
        shape = x.shape[:-1]
        return np.stack([e(env, shape) for e in self.b], axis=-1)

    def eval_sigma(self, t, x, xi):
        env = self._env(t, None, x, xi)
        shape = x.shape[:-1]
        return np.stack([np.stack([e(env, shape) for e in row], axis=-1) for row in self.sigma], axis=-2)

    def eval_gamma(self, t):
        t = np.asarray(t, dtype=float)
        env = {"t": t}
        return np.stack([np.stack([e(env, t.shape) for e in row], axis=-1) for row in self.gamma], axis=-2)

    def eval_f(self, t, mom, x, xi):
        return np.array(self.f(self._env(t, mom, x, xi), x.shape[:-1]))

    def eval_g(self, mom, x, xi):
        return np.array(self.g(self._env(None, mom, x, xi), x.shape[:-1]))

    def eval_c(self, t, mom, x, xi):
        env = self._env(t, mom, x, xi)
        shape = x.shape[:-1]
        return np.stack([e(env, shape) for e in self.c], axis=-1)

    # ------------------------------------------------------------------
    def c_depends_on_measure(self):
        return any(e.depends_on(k) for e in self.c for k in self.moment_exprs)

    def depends_on_measure(self, which):
        exprs = {"b": self.b, "c": self.c, "f": [self.f], "g": [self.g]}[which]
        return any(e.depends_on(k) for e in exprs for k in self.moment_exprs)

    def sources(self):
        """Canonical source strings for every coefficient (used for printing/hashing)."""
        return {
            "b": [e.source for e in self.b],
            "sigma": [[e.source for e in row] for row in self.sigma],
            "gamma": [[e.source for e in row] for row in self.gamma],
            "f": self.f.source,
            "g": self.g.source,
            "c": [e.source for e in self.c],
        }

    def replace(self, **kw):
        src = self.sources()
        src.update(kw)
        moments = kw.pop("moments", None)
        if moments is None:
            moments = {k: e.source for k, e in self.moment_exprs.items()}
        src.pop("moments", None)
        return Coefficients(self.d, self.l, self.m_bm, moments=moments, **src)


def _as_list(v, n, what):
    if isinstance(v, (str, Expression)):
        v = [v]
    v = list(v)
    if len(v) != n:
        raise ScenarioError(f"{what} must have {n} component(s), got {len(v)}")
    return v


def _as_matrix(v, rows, cols, what):
    if isinstance(v, (str, Expression)):
        v = [[v]]
    v = list(v)
    if rows == 1 and v and not isinstance(v[0], (list, tuple)):
        v = [v]
    elif cols == 1 and v and all(not isinstance(r, (list, tuple)) for r in v):
        v = [[r] for r in v]
    if len(v) != rows or any(len(r) != cols for r in v):
        raise ScenarioError(f"{what} must be a {rows}x{cols} matrix")
    return [list(r) for r in v]


# --------------------------------------------------------------------------
# scenario

@dataclass
class Discretization:
    t0: float = 0.0
    T: float = 1.0
    steps: int = 100
    particles: int = 1
    path_grid: int = 64
    lambda_steps: int = 16


@dataclass
class Thresholds:
    eta_meas: float | None = None
    eta_path: float | None = None


@dataclass
class InitialSpec:
    points: np.ndarray | None = None
    sampler: str | None = None
    mean: list | None = None
    std: list | None = None
    low: list | None = None
    high: list | None = None
    seed: int = 0


@dataclass
class Scenario:
    coefficients: Coefficients
    disc: Discretization = field(default_factory=Discretization)
    thresholds: Thresholds = field(default_factory=Thresholds)
    initial: InitialSpec = field(default_factory=InitialSpec)
    extra: dict = field(default_factory=dict)

    @property
    def t0(self):
        return self.disc.t0

    @property
    def T(self):
        return self.disc.T

    @property
    def N(self):
        return self.disc.particles

    def initial_ensemble(self):
        """Initial particles as ``(x, xi)`` arrays of shapes ``(N, d)`` and ``(N, l)``."""
        d, l = self.coefficients.d, self.coefficients.l
        N = self.disc.particles
        ini = self.initial
        if ini.points is not None:
            pts = np.asarray(ini.points, dtype=float).reshape(-1, d + l)
            if len(pts) == 1 and N > 1:
                pts = np.repeat(pts, N, axis=0)
        elif ini.sampler is not None:
            rng = np.random.default_rng(ini.seed)
            if ini.sampler == "normal":
                mean = np.broadcast_to(np.asarray(ini.mean if ini.mean is not None else 0.0, float), (d + l,))
                std = np.broadcast_to(np.asarray(ini.std if ini.std is not None else 1.0, float), (d + l,))
                pts = mean + std * rng.standard_normal((N, d + l))
            else:
                low = np.broadcast_to(np.asarray(ini.low if ini.low is not None else 0.0, float), (d + l,))
                high = np.broadcast_to(np.asarray(ini.high if ini.high is not None else 1.0, float), (d + l,))
                pts = low + (high - low) * rng.random((N, d + l))
        else:
            pts = np.zeros((N, d + l))
        return pts[:, :d].copy(), pts[:, d:].copy()

    def with_initial(self, x, xi, t0=None):
        """Copy with an explicit initial ensemble (and optionally a new start time)."""
        import copy

        new = copy.copy(self)
        new.disc = copy.copy(self.disc)
        pts = np.concatenate([np.asarray(x, float), np.asarray(xi, float)], axis=1)
        new.initial = InitialSpec(points=pts)
        new.disc.particles = len(pts)
        if t0 is not None:
            new.disc.t0 = float(t0)
        return new

    def eta_meas(self, xi_range=1.0):
        if self.thresholds.eta_meas is not None:
            return self.thresholds.eta_meas
        return 0.5 / np.sqrt(self.N) * max(xi_range, 1e-12)

    def eta_path(self, xi_range=1.0):
        if self.thresholds.eta_path is not None:
            return self.thresholds.eta_path
        return 1e-9 * max(xi_range, 1.0)

    def hash(self):
        return hashlib.sha256(format_scenario(self).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# parsing

_SECTION = re.compile(r"^\s*\[\s*([A-Za-z_]+)\s*\]\s*(#.*)?$")
_KV = re.compile(r"^\s*([A-Za-z_][A-Za-z_0-9]*)\s*=\s*(.*?)\s*$")


def _strip_comment(line):
    # '#' outside of quotes starts a comment
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def read_sections(text):
    """Split ``text`` into ``{section: {key: (value, line, col)}}``."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            if current not in SECTIONS + EXTRA_SECTIONS:
                raise ScenarioError(f"unknown section [{current}]", lineno, line.index("[") + 1)
            sections.setdefault(current, {})
            continue
        m = _KV.match(line)
        if not m:
            raise ScenarioError("expected 'key = value' or '[section]'", lineno, 1)
        if current is None:
            raise ScenarioError("key outside of any section", lineno, 1)
        key, val = m.group(1), m.group(2)
        col = m.start(2) + 1
        try:
            value = ast.literal_eval(val)
        except (ValueError, SyntaxError) as err:
            raise ScenarioError(f"cannot read value for {key!r}: {val!r}", lineno, col) from err
        if key in sections[current]:
            raise ScenarioError(f"duplicate key {key!r}", lineno, 1)
        sections[current][key] = (value, lineno, col)
    return sections


def _expr_error(err, entry, key):
    value, line, col = entry
    # map the expression column onto the file when the value is a bare string
    if isinstance(value, str) and isinstance(getattr(err.__cause__, "col", None), int):
        return ScenarioError(str(err), line, col + err.__cause__.col)
    return ScenarioError(str(err), line, col)


def parse_scenario(text):
    """Parse and validate scenario text into a :class:`Scenario`."""
    sec = read_sections(text)
    dims = {k: v[0] for k, v in sec.get("dims", {}).items()}
    unknown = set(dims) - {"d", "l", "m"}
    if unknown:
        raise ScenarioError(f"unknown key(s) in [dims]: {sorted(unknown)}", sec["dims"][sorted(unknown)[0]][1])
    d, l = int(dims.get("d", 1)), int(dims.get("l", 1))
    m_bm = int(dims.get("m", d))
    if d < 1 or l < 1 or m_bm < 1:
        raise ScenarioError("dimensions must be positive")
    moments = {}
    for k, entry in sec.get("moments", {}).items():
        if not isinstance(entry[0], str):
            raise ScenarioError(f"moment {k!r} must be a quoted expression", entry[1], entry[2])
        moments[k] = entry[0]
    co = sec.get("coefficients", {})
    allowed = {"b", "sigma", "gamma", "f", "g", "c"}
    for k, entry in co.items():
        if k not in allowed:
            raise ScenarioError(f"unknown coefficient {k!r}", entry[1], entry[2])
    defaults = {"b": ["0"] * d, "sigma": [["0"] * m_bm for _ in range(d)],
                "gamma": [["1" if i == j else "0" for j in range(l)] for i in range(d)],
                "f": "0", "g": "0", "c": ["0"] * l}
    kwargs = {}
    for k in allowed:
        kwargs[k] = co[k][0] if k in co else defaults[k]
    # validate piecewise to attach line numbers to errors
    try:
        coeffs = Coefficients(d, l, m_bm, moments=moments, **kwargs)
    except ScenarioError as err:
        key = str(err).split(":")[0].split()[-1] if ":" in str(err) else None
        where = co.get(key) or sec.get("moments", {}).get(key)
        if where is not None:
            raise _expr_error(err, where, key) from err
        raise
    if any(e.depends_on(k) for row in coeffs.sigma for e in row for k in moments):
        raise ScenarioError("sigma may not depend on the measure")

    disc = Discretization()
    for k, (v, line, col) in sec.get("discretization", {}).items():
        if not hasattr(disc, k):
            raise ScenarioError(f"unknown key {k!r} in [discretization]", line, col)
        setattr(disc, k, type(getattr(disc, k))(v))
    th = Thresholds()
    for k, (v, line, col) in sec.get("thresholds", {}).items():
        if not hasattr(th, k):
            raise ScenarioError(f"unknown key {k!r} in [thresholds]", line, col)
        setattr(th, k, float(v))
    ini = InitialSpec()
    for k, (v, line, col) in sec.get("initial", {}).items():
        if not hasattr(ini, k):
            raise ScenarioError(f"unknown key {k!r} in [initial]", line, col)
        if k == "seed":
            v = int(v)
            if not 0 <= v < 2**64:
                raise ScenarioError("seed must be a 64-bit unsigned integer", line, col)
        setattr(ini, k, v)
    if ini.points is not None:
        pts = np.asarray(ini.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.shape[1] != d + l:
            raise ScenarioError(f"initial points need {d + l} coordinates per row")
        if "particles" not in sec.get("discretization", {}):
            disc.particles = len(pts)
        elif len(pts) not in (1, disc.particles):
            raise ScenarioError("number of initial points does not match particles")
        ini.points = pts
    if ini.sampler is not None and ini.sampler not in ("normal", "uniform"):
        raise ScenarioError(f"unknown sampler {ini.sampler!r}")
    scen = Scenario(coeffs, disc, th, ini, extra={k: {kk: vv[0] for kk, vv in sec[k].items()}
                                                  for k in EXTRA_SECTIONS if k in sec})
    validate(scen)
    return scen


def validate(scen):
    disc = scen.disc
    if not disc.T > disc.t0:
        raise ScenarioError("T must exceed t0")
    if disc.particles < 1:
        raise ScenarioError("particles must be >= 1")
    for k in ("steps", "path_grid", "lambda_steps"):
        if getattr(disc, k) < 2:
            raise ScenarioError(f"{k} must be >= 2")


def _fmt_value(v):
    if isinstance(v, np.ndarray):
        v = v.tolist()
    return repr(v)


def format_scenario(scen):
    """Canonical text form; ``parse_scenario(format_scenario(s))`` is equivalent to ``s``."""
    co = scen.coefficients
    src = co.sources()
    lines = ["[dims]", f"d = {co.d}", f"l = {co.l}", f"m = {co.m_bm}", ""]
    if co.moment_exprs:
        lines.append("[moments]")
        for k in sorted(co.moment_exprs):
            lines.append(f"{k} = {co.moment_exprs[k].source!r}")
        lines.append("")
    lines.append("[coefficients]")
    for k in ("b", "sigma", "gamma", "f", "g", "c"):
        lines.append(f"{k} = {_fmt_value(src[k])}")
    lines.append("")
    lines.append("[discretization]")
    for k, v in vars(scen.disc).items():
        lines.append(f"{k} = {v!r}")
    th = {k: v for k, v in vars(scen.thresholds).items() if v is not None}
    if th:
        lines.append("")
        lines.append("[thresholds]")
        for k, v in th.items():
            lines.append(f"{k} = {v!r}")
    ini = {k: v for k, v in vars(scen.initial).items() if v is not None and not (k == "seed" and v == 0)}
    if ini:
        lines.append("")
        lines.append("[initial]")
        for k, v in ini.items():
            lines.append(f"{k} = {_fmt_value(v)}")
    for name, kv in scen.extra.items():
        lines.append("")
        lines.append(f"[{name}]")
        for k, v in kv.items():
            lines.append(f"{k} = {_fmt_value(v)}")
    return "\n".join(lines) + "\n"


def load_scenario(path):
    with open(path) as fh:
        return parse_scenario(fh.read())


# --------------------------------------------------------------------------
# standing assumption sampler

@dataclass
class AssumptionEntry:
    name: str
    status: str  # "pass" | "warn"
    worst_ratio: float
    detail: str


def _growth_ratio(vals, radius, power):
    return float(np.max(np.abs(vals) / (1.0 + radius ** power)))


def check_standing_assumptions(coeffs, box=1.0, sample_budget=2000, seed=0, t_range=(0.0, 1.0),
                               growth_factor=4.0, tolerance=2.0):
    """Falsification sampler for the standing assumptions.

    Samples points in the box ``[-box, box]^(d+l)`` and in the box scaled by
    ``growth_factor``.  Lipschitz ratios are worst difference quotients over
    random nearby pairs; growth constants are ``max |h| / (1 + |z|^p)``.  An
    assumption is flagged ``warn`` when its constant on the large box exceeds
    ``tolerance`` times the constant on the small box, or when an evaluation is
    not finite.  Passing is evidence, not proof.
    """
    rng = np.random.default_rng(seed)
    d, l = coeffs.d, coeffs.l
    n = max(sample_budget // 4, 8)
    report = []

    def sample(scale):
        z = scale * box * (2 * rng.random((n, d + l)) - 1)
        t = t_range[0] + (t_range[1] - t_range[0]) * rng.random(n)
        return t, z[:, :d], z[:, d:]

    def measure_for(x, xi):
        # moments of a small random ensemble around the sample, one per sample
        k = 4
        xs = x[:, None, :] + 0.1 * rng.standard_normal((len(x), k, d))
        xis = xi[:, None, :] + 0.1 * rng.standard_normal((len(x), k, l))
        mom = coeffs.moments(xs, xis, keepdims=False)
        return mom

    evaluators = {
        "b": lambda t, mom, x, xi: coeffs.eval_b(t, mom, x, xi),
        "sigma": lambda t, mom, x, xi: coeffs.eval_sigma(t, x, xi).reshape(len(x), -1),
        "f": lambda t, mom, x, xi: coeffs.eval_f(t, mom, x, xi)[:, None],
        "g": lambda t, mom, x, xi: coeffs.eval_g(mom, x, xi)[:, None],
        "c": lambda t, mom, x, xi: coeffs.eval_c(t, mom, x, xi),
    }

    def stats(name, scale):
        t, x, xi = sample(scale)
        mom = measure_for(x, xi)
        with np.errstate(all="ignore"):
            v0 = evaluators[name](t, mom, x, xi)
            h = 1e-3 * box * scale
            dz = h * rng.standard_normal((len(x), d + l))
            v1 = evaluators[name](t, mom, x + dz[:, :d], xi + dz[:, d:])
        finite = np.all(np.isfinite(v0)) and np.all(np.isfinite(v1))
        lip = np.max(np.linalg.norm(v1 - v0, axis=1) / np.linalg.norm(dz, axis=1)) if finite else np.inf
        radius = np.linalg.norm(np.concatenate([x, xi], axis=1), axis=1)
        norms = np.linalg.norm(v0, axis=1) if finite else np.full(len(x), np.inf)
        return finite, float(lip), radius, norms

    def entry(label, names, kind, power=None):
        worst = 0.0
        status = "pass"
        detail = []
        for name in names:
            f1, lip1, r1, n1 = stats(name, 1.0)
            f2, lip2, r2, n2 = stats(name, growth_factor)
            if not (f1 and f2):
                status = "warn"
                worst = np.inf
                detail.append(f"{name}: non-finite evaluation")
                continue
            if kind == "lipschitz":
                ratio = lip2 / max(lip1, 1e-12) if lip2 > 1e-12 else 1.0
                worst = max(worst, lip2)
                detail.append(f"{name}: L(small)={lip1:.3g}, L(large)={lip2:.3g}")
            else:
                g1 = _growth_ratio(n1, r1, power)
                g2 = _growth_ratio(n2, r2, power)
                ratio = g2 / max(g1, 1e-12) if g2 > 1e-12 else 1.0
                worst = max(worst, g2)
                detail.append(f"{name}: C(small)={g1:.3g}, C(large)={g2:.3g}")
            if ratio > tolerance:
                status = "warn"
        report.append(AssumptionEntry(label, status, float(worst), "; ".join(detail)))

    entry("lipschitz b, sigma", ["b", "sigma"], "lipschitz")
    entry("local continuity f, c (Lipschitz on boxes)", ["f", "c"], "lipschitz")
    entry("linear growth c", ["c"], "growth", 1)
    entry("quadratic growth f, g", ["f", "g"], "growth", 2)
    entry("bounded b, sigma", ["b", "sigma"], "growth", 0)
    entry("lipschitz f, g, c", ["f", "g", "c"], "lipschitz")
    report.append(AssumptionEntry("sigma free of the measure", "pass", 0.0, "enforced by construction"))
    return report
