import math
from functools import lru_cache

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from freshma.cra import (
    CraSpec,
    active_layer,
    aloha_cra,
    aloha_gamma,
    expected_crp_length,
    tree_outcomes,
    tree_splitting_cra,
    tree_states,
    validate_cra,
)
from freshma.errors import InvalidParameterError
from freshma.simulator import TreeSplitter
from freshma.simulator.base import UniformPool, substream


def crp_length_oracle(n, R):
    """Mean CRP length from the splitting recursion, one layer at a time."""

    @lru_cache(None)
    def L(k, x):
        if k <= 1 or x == R:
            return 1.0
        # the k = 0 branch leaves layer x unchanged, so L(k, x) appears on both sides
        rest = sum(math.comb(k, j) * (L(j, x + 1) + L(k - j, x)) for j in range(1, k + 1)) / 2**k
        return (1.0 + rest + L(0, x + 1) / 2**k) / (1.0 - 2.0**-k)

    return L(n, 0)


@pytest.mark.parametrize("N,R", [(1, 1), (2, 1), (3, 2), (4, 3), (5, 3)])
def test_tree_cra_is_stochastic(N, R):
    assert validate_cra(tree_splitting_cra(N, R))


@pytest.mark.parametrize("n", [0, 1, 5, 12])
def test_aloha_cra_is_stochastic(n):
    assert validate_cra(aloha_cra(n))


@pytest.mark.parametrize("N,R", [(1, 1), (2, 2), (4, 3), (6, 2)])
def test_tree_state_count(N, R):
    assert len(tree_states(N, R)) == math.comb(N + R + 2, R + 1)


def test_tree_state_count_small_case():
    assert tree_states(1, 1) == [(-1, -1), (0, -1), (0, 0), (1, -1), (1, 0), (1, 1)]


@pytest.mark.parametrize("n", range(0, 7))
@pytest.mark.parametrize("R", [1, 2, 3, 5])
def test_crp_length_matches_recursion(n, R):
    spec = tree_splitting_cra(6, R)
    # an empty CRP still spends one idle slot
    assert expected_crp_length(spec, n) == pytest.approx(crp_length_oracle(n, R), rel=1e-12)


def test_oracle_recovers_unbounded_binary_splitting():
    # two packets need 5 slots on average when splitting never stops
    assert crp_length_oracle(2, 60) == pytest.approx(5.0, rel=1e-12)
    assert crp_length_oracle(2, 4) < 5.0


def test_crp_length_matches_behavioural_splitter():
    pool = UniformPool(substream(3, 0))
    R, n, runs = 3, 4, 20000
    total = 0
    for _ in range(runs):
        t = TreeSplitter(R, pool)
        t.open(list(range(n)))
        while t.running:
            t.contend()
            total += 1
    mean = total / runs
    assert mean == pytest.approx(expected_crp_length(tree_splitting_cra(n, R), n), rel=0.02)


@given(st.integers(1, 60))
def test_aloha_gamma_is_binomial_single_success(i):
    assert aloha_gamma(i) == pytest.approx(stats.binom.pmf(1, i, 1.0 / i), rel=1e-12)


def test_aloha_gamma_limits():
    assert aloha_gamma(0) == 0.0
    assert aloha_gamma(1) == 1.0
    assert aloha_gamma(2000) == pytest.approx(math.exp(-1), rel=1e-3)


def test_active_layer_and_outcomes():
    assert active_layer((-1, -1, -1)) == -1
    assert active_layer((3, 1, -1)) == 1
    out = tree_outcomes((3, -1, -1), 2)
    assert sum(p for p, _, _ in out) == pytest.approx(1.0)
    assert {s for _, s, _ in out} == {(3, k, -1) for k in range(4)}
    # success at layer 1 resolves one packet of every shallower layer
    [(p, nxt, ev)] = tree_outcomes((3, 1, -1), 2)
    assert (p, nxt, ev) == (1.0, (2, -1, -1), "success")
    # collisions at the deepest layer drop the colliders
    [(_, nxt, ev)] = tree_outcomes((3, 2, 2), 2)
    assert (nxt, ev) == ((1, 0, -1), "collision")


def test_y_opens_crp_only_when_idle():
    spec = tree_splitting_cra(3, 2)
    Y = spec.Y(2).toarray()
    idle = spec.idle_index
    assert spec.states.decode(int(np.argmax(Y[idle]))) == (2, -1, -1)
    busy = spec.states.encode((1, 0, -1))
    assert Y[busy, busy] == 1.0
    with pytest.raises(InvalidParameterError):
        spec.Y(4)


def test_validation_reports_first_bad_row():
    good = aloha_cra(3)
    X1 = good.X1.tolil()
    X1[2, 1] = 0.2
    bad = CraSpec(good.states, good.X0, sp.csr_matrix(X1), good.y_builder, "aloha", 3, {"idle_index": 0})
    rep = validate_cra(bad)
    assert not rep
    assert (rep.matrix, rep.row) == ("X0+X1", 2)


def test_invalid_construction():
    with pytest.raises(InvalidParameterError):
        tree_splitting_cra(0, 2)
    with pytest.raises(InvalidParameterError):
        aloha_cra(-1)
