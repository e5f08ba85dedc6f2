"""Single-node mean-field models for systems with many nodes.

The other nodes are replaced by a constant per-slot probability ``alpha``
that the tagged node wins a reservation.  A fraction ``eta`` of slots is
used for reservation, each reservation slot succeeds with probability
``gamma``, and the successes are shared evenly by the nodes that contend.

Two models are provided.

* Peak mode: the node keeps every packet and, once its reservation
  succeeds, transmits until its buffer is empty.  The state is ``(q, t_d)``
  and ``(pi, h_bar, alpha)`` is found by fixed-point iteration.
* AoII mode: the node keeps only its freshest packet.  Its chain over
  ``s in {-c, ..., -1, 0, 1, 2, ...}`` has a closed-form solution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import SparseStochasticMatrix, SteadyState, solve_steady_state
from .errors import ConvergenceError, InfeasibleParametersError, InvalidParameterError

GAMMA_ALOHA = math.exp(-1.0)
TOP_MASS_TOL = 1e-6
N_START = 20
N_LIMIT = 20_480
OSCILLATION_SWEEPS = 5


def _check(M, lam, c, gamma):
    if int(M) != M or M < 1:
        raise InvalidParameterError(f"M must be a positive integer, got {M}")
    if int(c) != c or c < 1:
        raise InvalidParameterError(f"c must be a positive integer, got {c}")
    if not (0.0 <= lam and math.isfinite(lam)):
        raise InvalidParameterError(f"lambda must be finite and >= 0, got {lam}")
    if lam / M > 1.0:
        raise InvalidParameterError(f"per-node rate lambda/M = {lam / M} exceeds 1")
    if not 0.0 < gamma <= 1.0:
        raise InvalidParameterError(f"gamma must lie in (0, 1], got {gamma}")


def reservation_ratio(gamma: float, h_bar: float, c: int) -> float:
    """Fraction of slots spent on reservation, ``1 / (1 + gamma h c)``."""
    return 1.0 / (1.0 + gamma * h_bar * c)


# --------------------------------------------------------------------------
# peak AoII
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MfPeakModel:
    """State space ``{(0,0)} U {(q, t_d): 1 <= q <= N, 0 <= t_d <= c}``."""

    M: int
    lam: float
    c: int
    N: int
    gamma: float = GAMMA_ALOHA

    def __post_init__(self):
        _check(self.M, self.lam, self.c, self.gamma)
        if int(self.N) != self.N or self.N < 1:
            raise InvalidParameterError(f"N must be a positive integer, got {self.N}")

    @property
    def lam_bar(self) -> float:
        return self.lam / self.M

    @property
    def size(self) -> int:
        return self.N * (self.c + 1) + 1

    def index(self, q: int, td: int) -> int:
        if q == 0:
            if td != 0:
                raise InvalidParameterError("an empty node has t_d = 0")
            return 0
        return 1 + (q - 1) * (self.c + 1) + td

    def states(self) -> list[tuple[int, int]]:
        return [(0, 0)] + [(q, t) for q in range(1, self.N + 1) for t in range(self.c + 1)]

    def queue_lengths(self) -> np.ndarray:
        return np.array([q for q, _ in self.states()], dtype=float)

    def parts(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """``(A, D)`` with ``P(alpha) = A + alpha D``."""
        N, c, lb = self.N, self.c, self.lam_bar
        ix = self.index
        ra, ca, va = [], [], []
        rd, cd, vd = [], [], []

        def add(r, col, v, rows=ra, cols=ca, vals=va):
            if v != 0.0:
                rows.append(r); cols.append(col); vals.append(v)

        add(0, 0, 1.0 - lb)
        add(0, ix(1, 0), lb)
        for q in range(1, N + 1):
            up = min(q + 1, N)
            r = ix(q, 0)
            # waiting for a reservation: stay unless the node wins
            add(r, ix(q, 0), 1.0 - lb)
            add(r, ix(up, 0), lb)
            for dst, w in ((ix(q, 1), 1.0 - lb), (ix(up, 1), lb), (ix(q, 0), -(1.0 - lb)),
                           (ix(up, 0), -lb)):
                add(r, dst, w, rd, cd, vd)
            for t in range(1, c):
                r = ix(q, t)
                add(r, ix(q, t + 1), 1.0 - lb)
                add(r, ix(up, t + 1), lb)
            r = ix(q, c)
            add(r, ix(q - 1, 1) if q > 1 else 0, 1.0 - lb)
            add(r, ix(q, 1), lb)
        n = self.size
        A = sp.coo_matrix((va, (ra, ca)), shape=(n, n)).tocsr()
        D = sp.coo_matrix((vd, (rd, cd)), shape=(n, n)).tocsr()
        return A, D

    def matrix(self, alpha: float) -> SparseStochasticMatrix:
        A, D = self.parts()
        return SparseStochasticMatrix(A + alpha * D)


@dataclass
class MfFixedPoint:
    pi: SteadyState
    h_bar: float
    alpha: float
    eta: float
    iterations: int
    change: float
    damped: bool


@dataclass
class MfPeakResult:
    model: MfPeakModel
    fixed_point: MfFixedPoint
    peak_aoii: float
    mean_queue: float
    top_mass: float
    degenerate: bool = False

    @property
    def pi(self) -> np.ndarray:
        return self.fixed_point.pi.probabilities


def peak_alpha(M: int, gamma: float, eta: float, pi00: float) -> float:
    """Per-slot success probability ``eta gamma / (M (1 - pi00))``."""
    busy = 1.0 - pi00
    if busy <= 0.0:
        return 1.0
    return eta * gamma / (M * busy)


def peak_h_bar(pi: np.ndarray, q: np.ndarray) -> float:
    """Mean buffer content given the node is not empty."""
    busy = 1.0 - pi[0]
    return float(pi @ q) / busy if busy > 0 else 1.0


def fixed_point_residuals(result: MfPeakResult) -> tuple[float, float]:
    """``(|alpha - alpha(pi)|, |h - h(pi)|)`` at the returned point.

    ``alpha`` is the value that built the chain whose steady state is ``pi``.
    """
    fp, m = result.fixed_point, result.model
    pi = fp.pi.probabilities
    h = peak_h_bar(pi, m.queue_lengths())
    a = peak_alpha(m.M, m.gamma, reservation_ratio(m.gamma, h, m.c), pi[0])
    return abs(fp.alpha - min(a, 1.0)), abs(fp.h_bar - h)


def _iterate_peak(model: MfPeakModel, tol: float, max_iter: int, alpha0: float | None) -> MfFixedPoint:
    A, D = model.parts()
    q = model.queue_lengths()
    g, M, c = model.gamma, model.M, model.c
    alpha = alpha0 if alpha0 is not None else reservation_ratio(g, 1.0, c) * g / M
    pi_old = None
    signs: list[float] = []
    damped = False
    last = math.inf
    for it in range(1, max_iter + 1):
        st = solve_steady_state(SparseStochasticMatrix(A + alpha * D, validate=False))
        pi = st.probabilities
        h = peak_h_bar(pi, q)
        eta = reservation_ratio(g, h, c)
        target = min(peak_alpha(M, g, eta, pi[0]), 1.0)
        step = target - alpha
        if pi_old is not None:
            last = float(np.abs(pi - pi_old).max())
            if last < tol and abs(step) < tol:
                return MfFixedPoint(st, h, alpha, eta, it, last, damped)
        signs.append(math.copysign(1.0, step))
        if not damped and len(signs) > OSCILLATION_SWEEPS and all(
                signs[-k] != signs[-k - 1] for k in range(1, OSCILLATION_SWEEPS + 1)):
            damped = True
        alpha = alpha + (0.5 * step if damped else step)
        pi_old = pi
    raise ConvergenceError(f"mean-field fixed point did not settle in {max_iter} sweeps",
                           residual=last, iterations=max_iter)


def mf_peak_fixed_point(M: int, lam: float, c: int, N: int | None = None, *,
                        gamma: float = GAMMA_ALOHA, tol: float = 1e-12,
                        max_iter: int = 10_000) -> MfPeakResult:
    """Fixed point of ``(pi, h_bar, alpha)`` and the average peak AoII.

    Parameters
    ----------
    N : int, optional
        Buffer cap.  When omitted it starts at 20 and doubles until the
        steady-state mass at ``q = N`` falls below ``1e-6``.
    tol : float
        Bound on the sup-norm change of ``pi`` (and of ``alpha``) between
        sweeps.

    Returns
    -------
    MfPeakResult
        ``peak_aoii = E[q] / lambda_bar``.  For ``lam == 0`` the chain stays
        at ``(0, 0)``; the result is flagged ``degenerate`` and
        ``peak_aoii`` is NaN.
    """
    _check(M, lam, c, gamma)
    auto = N is None
    N = N_START if auto else N
    model = MfPeakModel(M, lam, c, N, gamma)
    if lam == 0:
        pi = np.zeros(model.size)
        pi[0] = 1.0
        st = SteadyState(pi, 0.0, "trivial", 0)
        fp = MfFixedPoint(st, 1.0, 1.0, reservation_ratio(gamma, 1.0, c), 0, 0.0, False)
        return MfPeakResult(model, fp, math.nan, 0.0, 0.0, degenerate=True)
    alpha0 = None
    while True:
        model = MfPeakModel(M, lam, c, N, gamma)
        fp = _iterate_peak(model, tol, max_iter, alpha0)
        pi = fp.pi.probabilities
        top = float(pi[model.index(N, 0):].sum())
        if not auto or top < TOP_MASS_TOL:
            break
        if 2 * N > N_LIMIT:
            raise ConvergenceError(f"buffer mass at q = N stays at {top:.3g} up to N = {N}",
                                   residual=top, iterations=fp.iterations)
        N *= 2
        alpha0 = fp.alpha
    Lq = float(pi @ model.queue_lengths())
    return MfPeakResult(model, fp, Lq / model.lam_bar, Lq, top)


# --------------------------------------------------------------------------
# average AoII
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MfAoiiClosedForm:
    pi1: float
    alpha: float
    eta: float
    avg_aoii: float
    a: float
    b: float
    d: float
    lam_bar: float

    def quadratic_residual(self) -> float:
        return self.a * self.pi1 ** 2 + self.b * self.pi1 - self.d

    @property
    def pi0(self) -> float:
        return self.pi1 / self.lam_bar


def aoii_from_alpha(alpha: float, pi1: float, c: int) -> float:
    """Average AoII ``(1/alpha^2 + c/alpha + c(c+1)/2) pi1``.

    The ``c/alpha`` term collects the age ``x + s + c + 1`` accrued over the
    ``c`` transmission states, with ``E[x] = 1/alpha``.
    """
    return (1.0 / alpha ** 2 + c / alpha + c * (c + 1) / 2.0) * pi1


def aoii_alpha(M: int, gamma: float, eta: float, contend_mass: float) -> float:
    return eta * gamma / (M * contend_mass)


def _aoii_capacity_check(M, lam, c, gamma, eta, alpha):
    if not (0.0 < alpha <= 1.0):
        bound = eta * gamma
        raise InfeasibleParametersError(
            f"mean-field AoII model needs a saturated reservation channel: alpha = {alpha!r} "
            f"lies outside (0, 1] for M={M}, lambda={lam}, c={c}, gamma={gamma} "
            f"(requires M (1/(eta gamma) - 1/lambda) >= c + 1, eta gamma = {bound:.6g})",
            bound="lambda > eta*gamma")


def mf_aoii_closed_form(M: int, lam: float, c: int, gamma: float = GAMMA_ALOHA) -> MfAoiiClosedForm:
    """Closed-form steady state of the single-node AoII chain.

    ``pi1`` solves ``a pi1^2 + b pi1 - d = 0`` with ``a = -M (1/lb + c)``,
    ``b = M + eta gamma c + eta gamma / lb`` and ``d = eta gamma``.

    Raises
    ------
    InfeasibleParametersError
        No root gives ``alpha`` in ``(0, 1]``.  This happens when the offered
        load does not saturate the reservation channel.
    """
    _check(M, lam, c, gamma)
    if lam <= 0:
        raise InvalidParameterError("the AoII closed form needs lambda > 0")
    lb = lam / M
    eta = reservation_ratio(gamma, 1.0, c)
    a = -M * (1.0 / lb + c)
    b = M + eta * gamma * c + eta * gamma / lb
    d = eta * gamma
    disc = b * b - 4.0 * (-a) * d
    if disc < 0:
        raise InfeasibleParametersError(f"negative discriminant {disc!r} for M={M}, lambda={lam}, c={c}",
                                        bound="discriminant")
    # the root that is not the alpha -> infinity branch 1/(c + 1/lb)
    pi1 = (-b + math.sqrt(disc)) / (2.0 * a)
    # a cancellation-free form of the same root
    pi1 = 2.0 * d / (b + math.sqrt(disc)) if b > 0 else pi1
    contend = 1.0 - pi1 * (c + 1.0 / lb)
    alpha = aoii_alpha(M, gamma, eta, contend) if contend > 0 else math.inf
    _aoii_capacity_check(M, lam, c, gamma, eta, alpha)
    return MfAoiiClosedForm(pi1, alpha, eta, aoii_from_alpha(alpha, pi1, c), a, b, d, lam_bar=lb)


def mf_aoii_fixed_point(M: int, lam: float, c: int, gamma: float = GAMMA_ALOHA, *, tol: float = 1e-15,
                        max_iter: int = 1_000_000) -> MfAoiiClosedForm:
    """Solve ``pi1 = 1 / (1/alpha + c + 1/lb)`` with ``alpha(pi1)`` by iteration.

    An independent route to the quantities of :func:`mf_aoii_closed_form`.
    """
    _check(M, lam, c, gamma)
    if lam <= 0:
        raise InvalidParameterError("the AoII fixed point needs lambda > 0")
    lb = lam / M
    eta = reservation_ratio(gamma, 1.0, c)
    k = c + 1.0 / lb
    pi1 = 0.5 / k
    for it in range(max_iter):
        alpha = aoii_alpha(M, gamma, eta, 1.0 - k * pi1)
        new = 1.0 / (1.0 / alpha + k)
        if abs(new - pi1) <= tol * new:
            pi1 = new
            break
        pi1 = new
    else:
        raise ConvergenceError("AoII fixed point did not settle", residual=abs(new - pi1),
                               iterations=max_iter)
    alpha = aoii_alpha(M, gamma, eta, 1.0 - k * pi1)
    _aoii_capacity_check(M, lam, c, gamma, eta, alpha)
    a = -M * k
    b = M + eta * gamma * k
    return MfAoiiClosedForm(pi1, alpha, eta, aoii_from_alpha(alpha, pi1, c), a, b, eta * gamma,
                            lam_bar=lb)


@dataclass
class MfAoiiChainResult:
    avg_aoii: float
    alpha: float
    states: np.ndarray
    pi: np.ndarray
    s_max: int
    iterations: int

    def mass(self, s: int) -> float:
        return float(self.pi[int(np.searchsorted(self.states, s))])


def aoii_chain_matrix(c: int, lam_bar: float, alpha: float, s_max: int) -> tuple[np.ndarray, SparseStochasticMatrix]:
    """Truncated chain over ``s = -c..s_max``; ``s_max`` keeps ``1 - alpha`` as a self-loop."""
    states = np.arange(-c, s_max + 1)
    n = states.size
    ix = lambda s: s + c  # noqa: E731
    rows, cols, vals = [], [], []
    for s in range(-c, 0):
        rows.append(ix(s)); cols.append(ix(s + 1)); vals.append(1.0)
    rows += [ix(0), ix(0)]; cols += [ix(0), ix(1)]; vals += [1.0 - lam_bar, lam_bar]
    for s in range(1, s_max + 1):
        rows += [ix(s), ix(s)]
        cols += [ix(-c), ix(min(s + 1, s_max))]
        vals += [alpha, 1.0 - alpha]
    P = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return states, SparseStochasticMatrix(P)


def chain_aoii(states: np.ndarray, pi: np.ndarray, c: int) -> float:
    """Average AoII of a chain distribution, with ``E[x]`` from the positive states."""
    pos = states > 0
    wait = float(pi[pos].sum())
    x_bar = float(states[pos] @ pi[pos]) / wait
    neg = states < 0
    return float(states[pos] @ pi[pos]) + float((x_bar + states[neg] + c + 1) @ pi[neg])


def mf_aoii_chain_check(M: int, lam: float, c: int, gamma: float = GAMMA_ALOHA, s_max: int | None = None,
                        *, tol: float = 1e-13, max_iter: int = 200) -> MfAoiiChainResult:
    """Average AoII from the numerically solved truncated chain.

    ``alpha`` is found by a secant iteration on the chain's own coupling
    ``alpha = eta gamma / (M (1 - sum_{s <= 0} pi_s))``.  When ``s_max`` is
    omitted it doubles from 256 until the steady-state mass at ``s_max`` is
    below ``1e-14``.
    """
    _check(M, lam, c, gamma)
    if lam <= 0:
        raise InvalidParameterError("the AoII chain needs lambda > 0")
    lb = lam / M
    eta = reservation_ratio(gamma, 1.0, c)
    size = 256 if s_max is None else s_max

    def coupled(alpha, size):
        states, P = aoii_chain_matrix(c, lb, alpha, size)
        pi = solve_steady_state(P).probabilities
        return aoii_alpha(M, gamma, eta, float(pi[states > 0].sum())), states, pi

    while True:
        a0, a1 = 0.5 * eta * gamma / M, eta * gamma / M
        f0 = coupled(a0, size)[0] - a0
        it = 0
        while True:
            it += 1
            f1, states, pi = coupled(a1, size)
            f1 -= a1
            if abs(f1) <= tol * a1 or it >= max_iter:
                break
            a0, a1, f0 = a1, a1 - f1 * (a1 - a0) / (f1 - f0), f1
            if not 0 < a1 <= 1:
                _aoii_capacity_check(M, lam, c, gamma, eta, a1)
        if abs(f1) > tol * a1:
            raise ConvergenceError("chain coupling did not settle", residual=abs(f1), iterations=it)
        if s_max is not None or pi[-1] < 1e-14:
            break
        size *= 2
    _aoii_capacity_check(M, lam, c, gamma, eta, a1)
    return MfAoiiChainResult(chain_aoii(states, pi, c), a1, states, pi, size, it)


__all__ = [
    "GAMMA_ALOHA", "MfAoiiChainResult", "MfAoiiClosedForm", "MfFixedPoint", "MfPeakModel", "MfPeakResult",
    "aoii_chain_matrix", "aoii_from_alpha", "chain_aoii", "fixed_point_residuals", "mf_aoii_chain_check",
    "mf_aoii_closed_form", "mf_aoii_fixed_point", "mf_peak_fixed_point", "peak_alpha", "peak_h_bar",
    "reservation_ratio",
]
