import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfsingular.measures import (Coupling, EmpiricalMeasure, MeasureFlow, classify_jump_times,
                                 coupling_cost, enumerate_monotone_couplings, optimal_assignment,
                                 wasserstein2)


def _measure(pts, d=1, l=1):
    return EmpiricalMeasure(np.asarray(pts, float), d, l)


def test_singletons_distance():
    assert wasserstein2(_measure([[0, 0]]), _measure([[3, 4]])) == pytest.approx(5.0)


def test_identical_ensembles_zero(rng):
    m = _measure(rng.normal(size=(7, 2)))
    assert wasserstein2(m, m) == 0.0
    assert wasserstein2(m, m.permuted(rng.permutation(7))) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_w2_matches_permutation_enumeration(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    best = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(5)))
    assert wasserstein2(_measure(a, 2, 1), _measure(b, 2, 1)) == pytest.approx(np.sqrt(best), abs=1e-10)


def test_shape_errors():
    with pytest.raises(ValueError):
        wasserstein2(_measure([[0, 0]]), EmpiricalMeasure(np.zeros((1, 3)), 2, 1))
    with pytest.raises(ValueError):
        wasserstein2(_measure([[0, 0]]), _measure([[0, 0], [1, 1]]))
    with pytest.raises(ValueError):
        _measure([[np.nan, 0]])


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_w2_is_a_metric(seed, N):
    rng = np.random.default_rng(seed)
    a, b, c = (_measure(rng.normal(size=(N, 2))) for _ in range(3))
    ab, ba = wasserstein2(a, b), wasserstein2(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab >= 0
    assert ab <= wasserstein2(a, c) + wasserstein2(c, b) + 1e-9


@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_w2_below_any_coupling(seed, N):
    rng = np.random.default_rng(seed)
    a, b = _measure(rng.normal(size=(N, 2))), _measure(rng.normal(size=(N, 2)))
    w = wasserstein2(a, b) ** 2
    assert w <= coupling_cost(a, b, Coupling(tuple(rng.permutation(N)))) + 1e-12
    perm, cost = optimal_assignment(a, b)
    assert coupling_cost(a, b, Coupling(tuple(perm))) == pytest.approx(w, abs=1e-12)
    assert cost == pytest.approx(w, abs=1e-12)


def test_coupling_matrix_marginals():
    P = Coupling((2, 0, 1)).matrix()
    assert np.allclose(P.sum(0), 1 / 3) and np.allclose(P.sum(1), 1 / 3)


def test_ensemble_text_roundtrip(rng):
    m = _measure(rng.normal(size=(4, 3)), 2, 1)
    back = EmpiricalMeasure.from_text(m.to_text())
    assert np.array_equal(back.points, m.points) and (back.d, back.l) == (2, 1)


def _flow_with(jump_rows, size, N, stamps=5, at=2):
    left = np.zeros((stamps, N, 2))
    left[:, :, 0] = 100.0 * np.arange(N)   # far apart in x, so only the identity pairing is cheap
    left[:, :, 1] = np.linspace(0, 1, N)
    right = left.copy()
    right[at:, jump_rows, 1] += size
    left[at + 1:, jump_rows, 1] += size
    return MeasureFlow(np.linspace(0, 1, stamps), left, right, 1, 1)


def test_synchronised_jump_is_macroscopic():
    flow = _flow_with(slice(None), 1.0, 10)
    jd, jc = classify_jump_times(flow)
    assert list(jd) == [2] and 2 not in jc


def test_single_particle_jump_is_first_kind():
    N = 100
    flow = _flow_with([7], 1.0, N)
    assert flow.jump_gaps()[2] == pytest.approx(0.1, abs=1e-12)
    jd, jc = classify_jump_times(flow, eta_meas=0.2)
    assert len(jd) == 0 and 2 in jc


def test_continuous_flow_has_no_macroscopic_jumps():
    jd, jc = classify_jump_times(_flow_with([], 0.0, 10))
    assert len(jd) == 0 and len(jc) == 5


@given(st.integers(0, 2 ** 31))
def test_zero_threshold_marks_every_discontinuity(seed):
    rng = np.random.default_rng(seed)
    stamps, N = 6, 4
    left = rng.normal(size=(stamps, N, 2))
    right = left.copy()
    moved = rng.random((stamps, N)) < 0.2
    right[..., 1] += moved * rng.uniform(0.1, 1.0, size=(stamps, N))
    jd, _ = classify_jump_times(MeasureFlow(np.linspace(0, 1, stamps), left, right, 1, 1), eta_meas=1e-300)
    assert set(jd) == set(np.flatnonzero(moved.any(axis=1)))


def test_two_point_couplings():
    a, b = _measure([[0, 0], [0, 1]]), _measure([[0, 1], [0, 2]])
    assert len(list(enumerate_monotone_couplings(a, b))) == 2


def test_infeasible_target_has_no_couplings():
    a, b = _measure([[0, 0], [0, 1]]), _measure([[0, -1], [0, 2]])
    assert list(enumerate_monotone_couplings(a, b)) == []


@pytest.mark.parametrize("seed", range(10))
def test_coupling_count_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = _measure(rng.normal(size=(4, 3)), 1, 2)
    b = _measure(np.hstack([rng.normal(size=(4, 1)), a.xi[rng.permutation(4)] + rng.uniform(-0.3, 1, (4, 2))]), 1, 2)
    brute = {p for p in itertools.permutations(range(4))
             if all(np.all(b.xi[p[i]] >= a.xi[i]) for i in range(4))}
    got = {c.perm for c in enumerate_monotone_couplings(a, b)}
    assert got == brute
