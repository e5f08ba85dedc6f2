"""Frequency-division tandem-queue chain and bandwidth optimiser.

A reservation channel of bandwidth ``w1`` carries Aloha reservation signals in
slots of length ``T1 = 1/w1``.  A data channel of bandwidth ``1 - w1`` carries
one combined packet of ``K`` data packets per frame of length ``K T2`` with
``T2 = c / (1 - w1)``.  The chain is observed at frame boundaries and its
state is ``(q2, q1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .core import SparseStochasticMatrix, poisson_cutoff, poisson_pmf_vector, solve_steady_state
from .cra import aloha_gamma
from .errors import ConvergenceError, InfeasibleParametersError, InvalidParameterError

ARRIVAL_TAIL_TOL = 1e-12
DEFAULT_CAP = 30


@dataclass(frozen=True)
class FdParams:
    """Parameters of the FD model; ``w1`` may be ``None`` before optimisation."""

    K: int
    c: float
    lam: float
    w1: float | None = None
    N1: int = DEFAULT_CAP
    N2: int = DEFAULT_CAP

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise InvalidParameterError(f"K must be a positive integer, got {self.K}")
        if not self.c > 0:
            raise InvalidParameterError(f"c must be positive, got {self.c}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise InvalidParameterError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.w1 is not None and not 0 < self.w1 < 1:
            raise InvalidParameterError(f"w1 must lie in (0, 1), got {self.w1}")
        if self.N1 < 1 or self.N2 < 1:
            raise InvalidParameterError("queue caps must be >= 1")

    def with_w1(self, w1: float) -> "FdParams":
        return replace(self, w1=w1)

    @property
    def lambda_bound(self) -> float:
        """Largest arrival rate for which some ``w1`` stabilises both queues."""
        return self.K / (math.e + self.K * self.c)

    @property
    def w1_interval(self) -> tuple[float, float]:
        return self.lam * math.e / self.K, 1.0 - self.lam * self.c

    def is_stable(self) -> bool:
        lo, hi = self.w1_interval
        return self.w1 is not None and lo < self.w1 < hi


@dataclass(frozen=True)
class FrameShape:
    T1: float
    T2: float
    x: float
    x_low: int
    x_high: int
    sigma: float
    slot_rate: float

    @classmethod
    def from_params(cls, p: FdParams) -> "FrameShape":
        w1 = p.w1
        T1, T2 = 1.0 / w1, p.c / (1.0 - w1)
        x = p.K * T2 / T1
        lo = math.floor(x)
        return cls(T1, T2, x, lo, lo + 1, 1.0 - x + lo, p.lam * T1 / p.K)

    def d_sigma(self, p: FdParams) -> float:
        return -p.K * p.c / (1.0 - p.w1) ** 2


def _slot_arrivals(rate: float):
    """Per-slot signal pmf with the tail lumped into the last bucket."""
    ymax = max(1, poisson_cutoff(rate, ARRIVAL_TAIL_TOL))
    p = poisson_pmf_vector(rate, ymax)
    p[-1] = max(0.0, 1.0 - p[:-1].sum())
    return p


def _frame_dp(q1: int, slots: int, rate: float, w1: float, with_derivative: bool):
    """Distribution over (final queue length k, successes z) after ``slots`` slots.

    Returns ``H[k, z]`` and, optionally, ``dH/dw1`` where the per-slot rate is
    ``rate = lambda / (K w1)``.
    """
    p = _slot_arrivals(rate)
    ymax = p.size - 1
    y = np.arange(ymax + 1)
    dp = p * (rate - y) / w1
    dp[-1] = -dp[:-1].sum()
    kmax = q1 + slots * ymax
    H = np.zeros((kmax + 1, slots + 1))
    H[q1, 0] = 1.0
    dH = np.zeros_like(H) if with_derivative else None
    gam = np.array([aloha_gamma(k) for k in range(kmax + 1)])[:, None]
    for _ in range(slots):
        # reservation attempt on the current queue
        S = H * (1.0 - gam)
        S[:-1, 1:] += (H * gam)[1:, :-1]
        if with_derivative:
            dS = dH * (1.0 - gam)
            dS[:-1, 1:] += (dH * gam)[1:, :-1]
        # then new signals join
        H = np.zeros_like(S)
        for j in range(ymax + 1):
            H[j:] += p[j] * S[:kmax + 1 - j]
        if with_derivative:
            dH2 = np.zeros_like(S)
            for j in range(ymax + 1):
                dH2[j:] += p[j] * dS[:kmax + 1 - j] + dp[j] * S[:kmax + 1 - j]
            dH = dH2
    return H, dH


def fd_frame_kernel(q1: int, params: FdParams, *, derivative: bool = False):
    """Joint law of new signals ``y`` and successes ``z`` over one frame.

    Returns a dict ``{(y, z): h}`` or, with ``derivative=True``, the pair
    ``(h, dh/dw1)`` of such dicts.
    """
    H, dH = _kernel_arrays(q1, params, derivative)
    out, dout = {}, {}
    for k, z in zip(*np.nonzero(H if not derivative else (H != 0) | (dH != 0))):
        key = (int(k) - q1 + int(z), int(z))
        out[key] = float(H[k, z])
        if derivative:
            dout[key] = float(dH[k, z])
    return (out, dout) if derivative else out


def _kernel_arrays(q1, params, derivative):
    shape = FrameShape.from_params(params)
    Hh, dHh = _frame_dp(q1, shape.x_high, shape.slot_rate, params.w1, derivative)
    Hl, dHl = _frame_dp(q1, shape.x_low, shape.slot_rate, params.w1, derivative)
    H = np.zeros_like(Hh)
    s = shape.sigma
    H += (1.0 - s) * Hh
    H[:Hl.shape[0], :Hl.shape[1]] += s * Hl
    dH = None
    if derivative:
        ds = shape.d_sigma(params)
        dH = (1.0 - s) * dHh - ds * Hh
        dH[:Hl.shape[0], :Hl.shape[1]] += s * dHl + ds * Hl
    return H, dH


def _chain_matrices(params: FdParams, derivative: bool):
    N1, N2 = params.N1, params.N2
    n = (N1 + 1) * (N2 + 1)
    P = np.zeros((N2 + 1, N1 + 1, N2 + 1, N1 + 1))
    dP = np.zeros_like(P) if derivative else None
    for q1 in range(N1 + 1):
        H, dH = _kernel_arrays(q1, params, derivative)
        kk = np.minimum(np.arange(H.shape[0]), N1)
        for q2 in range(N2 + 1):
            base = max(q2 - 1, 0)
            zz = np.minimum(base + np.arange(H.shape[1]), N2)
            np.add.at(P[q2, q1], (zz[None, :], kk[:, None]), H)
            if derivative:
                np.add.at(dP[q2, q1], (zz[None, :], kk[:, None]), dH)
    P = P.reshape(n, n)
    return P, (dP.reshape(n, n) if derivative else None)


@dataclass
class FdChain:
    params: FdParams
    shape: FrameShape
    matrix: SparseStochasticMatrix
    dense: np.ndarray
    d_dense: np.ndarray | None
    stable: bool
    _pi: np.ndarray | None = field(default=None, repr=False)

    def steady_state(self) -> np.ndarray:
        if self._pi is None:
            self._pi = solve_steady_state(self.matrix).probabilities
        return self._pi

    def occupancy(self) -> np.ndarray:
        q2, q1 = np.meshgrid(np.arange(self.params.N2 + 1), np.arange(self.params.N1 + 1), indexing="ij")
        return (q1 + q2).ravel().astype(float)


def build_fd_chain(params: FdParams, *, derivative: bool = False) -> FdChain:
    """Frame-boundary chain over ``(q2, q1)`` in row-major order."""
    if params.w1 is None:
        raise InvalidParameterError("build_fd_chain needs w1")
    P, dP = _chain_matrices(params, derivative)
    return FdChain(params, FrameShape.from_params(params), SparseStochasticMatrix(P), P, dP,
                   params.is_stable())


def fd_mean_occupancy(params: FdParams) -> tuple[float, float, float]:
    """``(E[q1], E[q2], E[q1 + q2])`` at frame boundaries."""
    ch = build_fd_chain(params)
    pi = ch.steady_state().reshape(params.N2 + 1, params.N1 + 1)
    q1 = float(pi.sum(axis=0) @ np.arange(params.N1 + 1))
    q2 = float(pi.sum(axis=1) @ np.arange(params.N2 + 1))
    return q1, q2, q1 + q2


def fd_peak_aoii(params: FdParams) -> float:
    """``K T2 / 2 + (K / lambda) E[q1 + q2]``."""
    shape = FrameShape.from_params(params)
    offset = params.K * shape.T2 / 2.0
    if params.lam == 0:
        return offset
    return offset + params.K / params.lam * fd_mean_occupancy(params)[2]


def fd_peak_aoii_derivative(params: FdParams) -> float:
    """Analytic ``d ell / d w1`` through ``d pi = -pi (dP) Q^{-1}``."""
    first = params.K * params.c / (2.0 * (1.0 - params.w1) ** 2)
    if params.lam == 0:
        return first
    ch = build_fd_chain(params, derivative=True)
    pi = ch.steady_state()
    n = pi.size
    Q = ch.dense - np.eye(n) + 1.0
    rhs = -(pi @ ch.d_dense)
    dpi = sla.solve(Q.T, rhs)
    return first + params.K / params.lam * float(dpi @ ch.occupancy())


@dataclass(frozen=True)
class FdOptimum:
    w1: float
    peak_aoii: float
    bracket: tuple[float, float]
    iterations: int
    method: str


def optimize_fd_bandwidth(params: FdParams, eps: float = 1e-6, *, grid_points: int = 25,
                          max_iter: int = 200) -> FdOptimum:
    """Minimise ``ell(w1)`` over ``(lambda e / K, 1 - lambda c)``.

    Bisection on the sign of the analytic derivative, then a check against a
    coarse grid.  If the grid finds a clearly better point the search falls
    back to golden-section minimisation around it.
    """
    if params.lam <= 0:
        raise InvalidParameterError("optimisation needs a positive arrival rate")
    if params.lam >= params.lambda_bound:
        raise InfeasibleParametersError(
            f"lambda={params.lam:g} violates lambda < K/(e + K c) = {params.lambda_bound:.6f}",
            bound=params.lambda_bound)
    lo, hi = params.w1_interval
    a, b = lo, hi
    it = 0
    while b - a >= eps:
        it += 1
        if it > max_iter:
            raise ConvergenceError("bandwidth bisection exceeded its iteration cap", iterations=it)
        mid = 0.5 * (a + b)
        if fd_peak_aoii_derivative(params.with_w1(mid)) < 0:
            a = mid
        else:
            b = mid
    w_star = 0.5 * (a + b)
    best = fd_peak_aoii(params.with_w1(w_star))

    grid = np.linspace(lo, hi, grid_points + 2)[1:-1]
    vals = np.array([fd_peak_aoii(params.with_w1(w)) for w in grid])
    g = int(np.argmin(vals))
    if vals[g] < best * (1 - 1e-9) - 1e-12:
        ga = grid[g - 1] if g > 0 else lo
        gb = grid[g + 1] if g + 1 < grid.size else hi
        w_star, best, it2 = _golden(lambda w: fd_peak_aoii(params.with_w1(w)), ga, gb, eps)
        return FdOptimum(w_star, best, (ga, gb), it + it2, "golden")
    return FdOptimum(w_star, best, (a, b), it, "bisection")


def _golden(f, a, b, eps):
    inv = (math.sqrt(5) - 1) / 2
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a >= eps:
        it += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    w = 0.5 * (a + b)
    return w, f(w), it


__all__ = [
    "FdChain", "FdOptimum", "FdParams", "FrameShape", "build_fd_chain", "fd_frame_kernel",
    "fd_mean_occupancy", "fd_peak_aoii", "fd_peak_aoii_derivative", "optimize_fd_bandwidth",
]
