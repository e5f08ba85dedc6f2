import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from freshma.errors import InfeasibleParametersError, InvalidParameterError
from freshma.peak_fd import (
    FdParams,
    FrameShape,
    _frame_dp,
    build_fd_chain,
    fd_frame_kernel,
    fd_mean_occupancy,
    fd_peak_aoii,
    fd_peak_aoii_derivative,
    optimize_fd_bandwidth,
)


def feasible_point(lam, frac, K=1, c=3.0):
    p = FdParams(K, c, lam)
    lo, hi = p.w1_interval
    return p.with_w1(lo + frac * (hi - lo))


def test_lambda_bound():
    p = FdParams(1, 3, 0.1)
    assert p.lambda_bound == pytest.approx(1 / (math.e + 3))
    assert p.lambda_bound == pytest.approx(0.17487770, abs=1e-8)
    assert FdParams(2, 3, 0.1).lambda_bound == pytest.approx(2 / (math.e + 6))
    assert p.w1_interval == pytest.approx((0.1 * math.e, 0.7))


def test_frame_shape():
    s = FrameShape.from_params(FdParams(1, 3, 0.1, 0.4))
    assert s.T1 == pytest.approx(2.5)
    assert s.T2 == pytest.approx(5.0)
    assert s.x == pytest.approx(2.0)
    assert (s.x_low, s.x_high, s.sigma) == (2, 3, pytest.approx(1.0))
    s = FrameShape.from_params(FdParams(1, 3, 0.1, 0.45))
    assert s.x_low + 1 - s.sigma == pytest.approx(s.x)


@given(st.integers(0, 6), st.integers(1, 4), st.floats(0.01, 1.5))
@settings(max_examples=40, deadline=None)
def test_frame_dp_arrival_marginal_is_poisson(q1, slots, rate):
    H, _ = _frame_dp(q1, slots, rate, 0.5, False)
    assert H.sum() == pytest.approx(1.0, abs=1e-12)
    k, z = np.nonzero(H)
    y = k - q1 + z
    marg = np.bincount(y, weights=H[k, z])
    ref = stats.poisson.pmf(np.arange(marg.size), slots * rate)
    # the per-slot tail is lumped at 1e-15, so compare away from the last bucket
    assert np.allclose(marg[:-1], ref[:-1], atol=1e-10)


def test_frame_dp_without_arrivals():
    # one waiting signal always gets through in the first slot
    H, _ = _frame_dp(1, 3, 0.0, 0.5, False)
    assert H[0, 1] == pytest.approx(1.0)
    # two signals: the first slot succeeds with probability 1/2
    H, _ = _frame_dp(2, 1, 0.0, 0.5, False)
    assert H[1, 1] == pytest.approx(0.5)
    assert H[2, 0] == pytest.approx(0.5)


@pytest.mark.parametrize("q1", [0, 1, 4])
def test_kernel_normalised_and_derivative_conserves_mass(q1):
    p = feasible_point(0.1, 0.4)
    h, dh = fd_frame_kernel(q1, p, derivative=True)
    assert sum(h.values()) == pytest.approx(1.0, abs=1e-12)
    assert sum(dh.values()) == pytest.approx(0.0, abs=1e-10)
    assert all(z <= q1 + y for y, z in h)


def test_chain_stochastic():
    ch = build_fd_chain(feasible_point(0.1, 0.5, c=3.0))
    assert ch.matrix.max_row_error() <= 1e-12
    assert ch.stable
    pi = ch.steady_state()
    assert pi.sum() == pytest.approx(1.0)


@settings(max_examples=6, deadline=None)
@given(st.floats(0.03, 0.15), st.floats(0.1, 0.9))
def test_derivative_matches_central_difference(lam, frac):
    p = feasible_point(lam, frac)
    h = 1e-5
    fd = (fd_peak_aoii(p.with_w1(p.w1 + h)) - fd_peak_aoii(p.with_w1(p.w1 - h))) / (2 * h)
    sigma = FrameShape.from_params(p).sigma
    if min(sigma, 1 - sigma) < 1e-3:
        return  # too close to a kink of the slot-count mixture
    assert fd_peak_aoii_derivative(p) == pytest.approx(fd, rel=1e-3)


def test_light_traffic_offset():
    p = FdParams(2, 3, 0.0, 0.4)
    assert fd_peak_aoii(p) == pytest.approx(2 * 5.0 / 2)
    assert fd_peak_aoii_derivative(p) == pytest.approx(2 * 3 / (2 * 0.6**2))


def test_peak_is_offset_plus_little():
    p = feasible_point(0.1, 0.5)
    _, _, L = fd_mean_occupancy(p)
    assert fd_peak_aoii(p) == pytest.approx(FrameShape.from_params(p).T2 / 2 + L / 0.1)


def test_optimum_is_local_minimum():
    opt = optimize_fd_bandwidth(FdParams(1, 3, 0.1))
    lo, hi = FdParams(1, 3, 0.1).w1_interval
    assert lo < opt.w1 < hi
    base = FdParams(1, 3, 0.1)
    for d in (-0.01, 0.01):
        assert opt.peak_aoii <= fd_peak_aoii(base.with_w1(opt.w1 + d))


@pytest.mark.parametrize("lam", [0.175, 0.2, 0.5])
def test_optimizer_rejects_infeasible_rate(lam):
    with pytest.raises(InfeasibleParametersError) as info:
        optimize_fd_bandwidth(FdParams(1, 3, lam))
    assert info.value.bound == pytest.approx(1 / (math.e + 3))


def test_unstable_w1_is_flagged_not_refused():
    p = FdParams(1, 3, 0.1, 0.9)
    assert not p.is_stable()
    assert fd_peak_aoii(p) > fd_peak_aoii(feasible_point(0.1, 0.5))


def test_parameter_validation():
    with pytest.raises(InvalidParameterError):
        FdParams(0, 3, 0.1)
    with pytest.raises(InvalidParameterError):
        FdParams(1, 3, 0.1, 1.0)
    with pytest.raises(InvalidParameterError):
        FdParams(1, 3, -0.1)
    with pytest.raises(InvalidParameterError):
        build_fd_chain(FdParams(1, 3, 0.1))
    with pytest.raises(InvalidParameterError):
        optimize_fd_bandwidth(FdParams(1, 3, 0.0))
