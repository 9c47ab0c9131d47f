import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfsingular.model import Coefficients, parse_scenario
from mfsingular.paths import MonotoneControlPath
from mfsingular.simulate import ControlPolicy, simulate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def coeffs(d=1, l=1, b=None, sigma=None, gamma=None, f="0", g="0", c=None, moments=None, m_bm=None):
    """Coefficients with zero defaults."""
    m_bm = m_bm or d
    return Coefficients(d, l, m_bm,
                        b=b or ["0"] * d,
                        sigma=sigma or [["0"] * m_bm for _ in range(d)],
                        gamma=gamma or [["0"] * l for _ in range(d)],
                        f=f, g=g, c=c or ["0"] * l, moments=moments)


def scenario(body):
    return parse_scenario(body)


def line_scenario(b="0", sigma="0", gamma="1", steps=10, N=1, T=1.0, points=None, moments="", extra="",
                  f="0", g="xi", c="0"):
    """Parsed scenario with d = l = 1 on [0, T]."""
    init = f"points = {points}\n" if points else ""
    return parse_scenario(f"""
[dims]
d = 1
l = 1
[moments]
{moments}
[coefficients]
b = ["{b}"]
sigma = [["{sigma}"]]
gamma = [["{gamma}"]]
f = "{f}"
g = "{g}"
c = ["{c}"]
[discretization]
t0 = 0.0
T = {T}
steps = {steps}
particles = {N}
[initial]
{init}{extra}""")


def random_jump_simulation(seed, N=6, steps=24):
    """Diffusion with a ramp, a synchronised jump and a few single-particle jumps."""
    rng = np.random.default_rng(seed)
    g = float(rng.uniform(-1, 1))
    sc = line_scenario(b="-0.5*x + 0.3*mx", sigma="0.3", gamma=f"{g!r} + 0.2*t", steps=steps, N=N,
                       moments='mx = "x"', extra=f'sampler = "normal"\nseed = {seed}\n')
    grid = np.linspace(0, 1, steps + 1)
    paths = []
    for _ in range(N):
        ramp = float(rng.uniform(0, 0.5)) * grid
        left, right = ramp.copy(), ramp.copy()
        if rng.random() < 0.5:
            k = int(rng.integers(1, steps))
            size = float(rng.uniform(0.2, 1.0))
            right[k:] += size
            left[k + 1:] += size
        paths.append(MonotoneControlPath(grid, left[:, None], right[:, None]))
    pol = ControlPolicy.prescribed(paths).with_jump(float(grid[int(rng.integers(1, steps))]),
                                                   float(rng.uniform(0.5, 1.5)))
    return simulate(sc, pol, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
