import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from freshma.core import (
    ArrivalModel,
    MixedRadixSpace,
    SparseStochasticMatrix,
    TableSpace,
    closed_class_count,
    enumerate_reachable,
    expectation,
    poisson_cutoff,
    poisson_pmf,
    poisson_pmf_vector,
    poisson_tail,
    solve_steady_state,
    trigger_stage_peak_aoii,
    truncated_poisson,
)
from freshma.errors import InvalidParameterError, ModelConstructionError, ReducibleChainError


def random_chain(n, seed, density=0.4):
    rng = np.random.default_rng(seed)
    A = rng.random((n, n)) * (rng.random((n, n)) < density)
    A += np.diag(np.roll(np.ones(n), 0)) * 0
    # a cycle through every state keeps the chain irreducible
    A[np.arange(n), (np.arange(n) + 1) % n] += 0.1
    return A / A.sum(axis=1, keepdims=True)


def eig_stationary(P):
    w, v = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(w - 1)))
    pi = np.real(v[:, k])
    return pi / pi.sum()


@given(st.floats(0.0, 30.0), st.integers(0, 80))
def test_poisson_pmf_matches_scipy(rate, k):
    assert poisson_pmf(rate, k) == pytest.approx(stats.poisson.pmf(k, rate), rel=1e-10, abs=1e-300)


@given(st.floats(0.0, 20.0), st.integers(0, 40))
def test_poisson_tail_matches_sf(rate, k):
    assert poisson_tail(rate, k) == pytest.approx(stats.poisson.sf(k - 1, rate), abs=1e-13)


@given(st.floats(0.0, 10.0), st.integers(0, 30))
def test_truncated_poisson_is_a_distribution(rate, cap):
    p = truncated_poisson(rate, cap)
    assert p.shape == (cap + 1,)
    assert p.min() >= 0
    assert p.sum() == pytest.approx(1.0, abs=1e-13)


def test_poisson_vector_and_cutoff():
    v = poisson_pmf_vector(2.5, 10)
    assert np.allclose(v, stats.poisson.pmf(np.arange(11), 2.5), rtol=1e-12)
    y = poisson_cutoff(0.7, 1e-12)
    assert poisson_tail(0.7, y) < 1e-12 <= poisson_tail(0.7, y - 1)
    assert poisson_pmf_vector(0.0, 3).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_poisson_rejects_negative_rate():
    with pytest.raises(InvalidParameterError):
        poisson_pmf(-1.0, 0)


def test_arrival_model():
    a = ArrivalModel(0.3, 3)
    assert a.per_node_rate == pytest.approx(0.1)
    assert a.busy_probability == pytest.approx(1 - math.exp(-0.1))
    with pytest.raises(InvalidParameterError):
        ArrivalModel(0.1, 0)


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(0, 4)), min_size=1, max_size=4), st.data())
def test_mixed_radix_round_trip(bounds, data):
    ranges = [(lo, lo + w) for lo, w in bounds]
    space = MixedRadixSpace(ranges)
    i = data.draw(st.integers(0, space.size - 1))
    s = space.decode(i)
    assert space.encode(s) == i
    assert s in space


def test_mixed_radix_is_lexicographic():
    space = MixedRadixSpace([(1, 2), (0, 2)])
    assert list(space) == [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]
    assert (3, 0) not in space


def test_table_space_and_reachability():
    seen = enumerate_reachable(0, lambda s: [(s + 1) % 5, (s * 2) % 5])
    space = TableSpace(seen)
    assert space.size == 5
    assert [space.encode(space.decode(i)) for i in range(5)] == list(range(5))


def test_two_state_closed_form():
    p, q = 0.3, 0.1
    P = SparseStochasticMatrix(np.array([[1 - p, p], [q, 1 - q]]))
    pi = solve_steady_state(P).probabilities
    assert np.allclose(pi, [q / (p + q), p / (p + q)], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_steady_state_methods_agree_with_eigenvector(n, seed):
    P = random_chain(n, seed)
    ref = eig_stationary(P)
    M = SparseStochasticMatrix(P)
    for method in ("dense", "sparse", "power"):
        ss = solve_steady_state(M, method=method)
        assert ss.residual <= 1e-10
        assert np.allclose(ss.probabilities, ref, atol=1e-9)


def test_reducible_chain_rejected():
    P = SparseStochasticMatrix(np.eye(3))
    assert closed_class_count(P) == 3
    with pytest.raises(ReducibleChainError):
        solve_steady_state(P)


def test_transient_states_allowed():
    P = SparseStochasticMatrix(np.array([[0.0, 1.0, 0.0], [0.0, 0.5, 0.5], [0.0, 0.5, 0.5]]))
    pi = solve_steady_state(P).probabilities
    assert np.allclose(pi, [0, 0.5, 0.5], atol=1e-14)


def test_non_stochastic_rows_rejected():
    with pytest.raises(ModelConstructionError, match="row 1"):
        SparseStochasticMatrix(np.array([[1.0, 0.0], [0.5, 0.4]]))
    with pytest.raises(ModelConstructionError):
        SparseStochasticMatrix(np.array([[1.5, -0.5], [0.0, 1.0]]))


def test_from_triplets_sums_duplicates():
    P = SparseStochasticMatrix.from_triplets([0, 0, 1], [1, 1, 0], [0.5, 0.5, 1.0], 2)
    assert P.row(0) == [(1, 1.0)]
    assert P.max_row_error() == 0.0


def test_large_sparse_chain():
    n = 6000
    rows = np.r_[np.arange(n), np.arange(n)]
    cols = np.r_[(np.arange(n) + 1) % n, np.arange(n)]
    vals = np.r_[np.full(n, 0.5), np.full(n, 0.5)]
    P = SparseStochasticMatrix(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))
    ss = solve_steady_state(P)
    assert ss.method == "sparse"
    assert np.allclose(ss.probabilities, 1.0 / n, atol=1e-12)


def test_expectation_and_trigger_wait():
    assert expectation([0.25, 0.75], [2.0, 4.0]) == pytest.approx(3.5)
    assert expectation([0.5, 0.5], lambda i: i) == pytest.approx(0.5)
    assert trigger_stage_peak_aoii(10, 3, 0.5) == pytest.approx(10 * 2 / 1.0)
    with pytest.raises(InvalidParameterError):
        trigger_stage_peak_aoii(10, 0, 0.5)
