import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freshma.aoii_exact import (
    age_cap_mass,
    arrival_step_kernel,
    average_aoii,
    build_polling_aoii_chain,
    build_ra_aoii_chain,
    polling_step1,
)
from freshma.cra import aloha_cra, tree_splitting_cra
from freshma.errors import InvalidParameterError, StateSpaceTooLargeError
from freshma.simulator import SimConfig, simulate


def chains(M, N, c, lam):
    yield build_polling_aoii_chain(M, N, c, lam)
    yield build_ra_aoii_chain(M, N, c, lam, aloha_cra(M))
    for R in (1, 2, 3):
        yield build_ra_aoii_chain(M, N, c, lam, tree_splitting_cra(M, R))


@given(st.integers(0, 12), st.floats(0.0, 1.0), st.integers(1, 12))
def test_arrival_kernel(age, a_bar, N):
    age = min(age, N)
    k = arrival_step_kernel(age, a_bar, N)
    assert sum(k.values()) == pytest.approx(1.0)
    if age == 0:
        assert set(k) <= {0, 1}
    else:
        assert k == {min(age + 1, N): 1.0}


def test_polling_step_cycles_pointer_and_serves():
    assert polling_step1((2, 0, 4, 0), 2, 3) == (1, 0, 4, 0)
    assert polling_step1((1, 0, 4, 0), 2, 3) == (2, 0, 4, 3)
    assert polling_step1((2, 0, 4, 1), 2, 3) == (2, 0, 0, 0)
    assert polling_step1((1, 0, 4, 0), 2, 3, service="age") == (2, 0, 4, 12)


@pytest.mark.parametrize("M,N", [(1, 8), (2, 6), (3, 3)])
def test_chains_are_stochastic_with_small_residual(M, N):
    for ch in chains(M, N, 2, 0.3):
        assert ch.matrix.max_row_error() <= 1e-12
        assert ch.steady_state().residual <= 1e-10


def test_single_node_schemes_coincide():
    # one node never collides, so every access scheme serves it the same way
    vals = [average_aoii(ch) for ch in chains(1, 15, 3, 0.4)]
    assert np.ptp(vals) < 1e-11


def test_zero_rate_gives_zero_aoii():
    for ch in chains(2, 5, 3, 0.0):
        assert average_aoii(ch) == pytest.approx(0.0, abs=1e-12)


def test_polling_pointer_uniform_without_traffic():
    ch = build_polling_aoii_chain(3, 3, 2, 0.0)
    pi = ch.steady_state().probabilities
    s = np.array([st[0] for st in ch.space])
    marg = np.bincount(s, weights=pi, minlength=4)[1:]
    assert np.allclose(marg, 1 / 3, atol=1e-9)


def test_polling_pointer_visits_every_node():
    ch = build_polling_aoii_chain(3, 3, 2, 0.5)
    pi = ch.steady_state().probabilities
    s = np.array([st[0] for st in ch.space])
    assert (np.bincount(s, weights=pi, minlength=4)[1:] > 0.05).all()


@pytest.mark.parametrize("build", [
    lambda lam: build_polling_aoii_chain(2, 10, 3, lam),
    lambda lam: build_ra_aoii_chain(2, 10, 3, lam, aloha_cra(2)),
    lambda lam: build_ra_aoii_chain(2, 10, 3, lam, tree_splitting_cra(2, 3)),
])
def test_aoii_increases_with_load(build):
    vals = [average_aoii(build(lam)) for lam in (0.05, 0.2, 0.5, 1.0)]
    assert np.all(np.diff(vals) > 0)


def test_age_cap_mass_shrinks_with_cap():
    # under Aloha a node can wait arbitrarily long, so some mass always sits at the cap
    m = [age_cap_mass(build_ra_aoii_chain(2, N, 3, 0.3, aloha_cra(2))) for N in (6, 10, 14)]
    assert m[0] > m[1] > m[2] > 0
    assert m[2] < 1e-2


def test_age_service_rule_is_slower():
    single = average_aoii(build_polling_aoii_chain(2, 6, 2, 0.4))
    age = average_aoii(build_polling_aoii_chain(2, 6, 2, 0.4, service="age"))
    assert age > single


@pytest.mark.parametrize("scheme,params", [
    ("polling-aoii", {}),
    ("aloha-aoii", {}),
    ("tree-aoii", {"R": 2}),
])
def test_chain_matches_simulation(scheme, params):
    M, N, c, lam = 2, 8, 2, 0.4
    if scheme == "polling-aoii":
        ch = build_polling_aoii_chain(M, N, c, lam)
    elif scheme == "aloha-aoii":
        ch = build_ra_aoii_chain(M, N, c, lam, aloha_cra(M))
    else:
        ch = build_ra_aoii_chain(M, N, c, lam, tree_splitting_cra(M, 2))
    met = simulate(SimConfig(scheme, {"M": M, "N": N, "c": c, "lambda": lam, **params}, 300_000, 2000, 5))
    assert abs(met.avg_aoii - average_aoii(ch)) < 4 * met.std_errors["avg_aoii"]


def test_invalid_parameters():
    with pytest.raises(InvalidParameterError):
        build_polling_aoii_chain(0, 5, 3, 0.1)
    with pytest.raises(InvalidParameterError):
        build_polling_aoii_chain(2, 5, 3, -0.1)
    with pytest.raises(InvalidParameterError):
        build_polling_aoii_chain(2, 5, 3, 0.1, service="fifo")
    with pytest.raises(InvalidParameterError):
        build_ra_aoii_chain(3, 5, 3, 0.1, tree_splitting_cra(2, 2))


def test_state_cap_enforced():
    with pytest.raises(StateSpaceTooLargeError):
        build_polling_aoii_chain(3, 10, 3, 0.1, max_states=100)
    with pytest.raises(StateSpaceTooLargeError):
        build_ra_aoii_chain(2, 10, 3, 0.1, aloha_cra(2), max_states=50)


def test_a_bar_is_poisson_busy_probability():
    # a single stale step from an up-to-date node happens with 1 - exp(-lambda / M)
    lam, M = 0.6, 3
    ch = build_polling_aoii_chain(M, 2, 1, lam)
    zero = ch.space.encode((1, 0, 0, 0, 0))
    row = dict(ch.matrix.row(zero))
    a = -math.expm1(-lam / M)
    assert row[ch.space.encode((2, 0, 0, 0, 0))] == pytest.approx((1 - a) ** 3)
