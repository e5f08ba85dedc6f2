"""Time-division tandem-queue chain for the average peak AoII.

Frames consist of ``Z1`` reservation slots followed by ``c * Z2`` data slots.
The chain state is ``(t_d, q2, q1, s)``: slot index within the frame,
transmission-queue length, reservation-queue length and CRA state.  Both
queues are capped at ``N``; reservation arrivals beyond the cap are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import SparseStochasticMatrix, SteadyState, poisson_pmf_vector, poisson_tail, solve_steady_state
from .cra import CraSpec, aloha_cra, tree_splitting_cra
from .errors import InvalidParameterError, ModelConstructionError, StateSpaceTooLargeError

DEFAULT_MAX_STATES = 3_000_000


@dataclass(frozen=True)
class TdFrame:
    Z1: int
    Z2: int
    c: int

    def __post_init__(self):
        for name in ("Z1", "Z2", "c"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidParameterError(f"{name} must be a positive integer, got {v}")

    @property
    def frame_length(self) -> int:
        return self.Z1 + self.c * self.Z2

    def completion_slots(self, placement: str = "completion") -> frozenset[int]:
        """1-based slot indices at which the transmission queue drops by one.

        ``completion`` places a departure at the end of each ``c``-slot data
        packet, ``Z1 + j c`` for ``j = 1..Z2``.  ``printed`` uses
        ``Z1 + j Z2`` for ``j = 1..c`` instead.
        """
        if placement == "completion":
            return frozenset(self.Z1 + j * self.c for j in range(1, self.Z2 + 1))
        if placement == "printed":
            return frozenset(self.Z1 + j * self.Z2 for j in range(1, self.c + 1))
        raise InvalidParameterError(f"unknown departure placement {placement!r}")


@dataclass
class TdBlocks:
    """``(N+1) r0``-square transitions of ``(q1, s)`` within one slot."""

    B: sp.csr_matrix
    A0: sp.csr_matrix
    A1: sp.csr_matrix
    no_success_mass: np.ndarray  # [i, s] = (Y_i X0 1)_s
    success_mass: np.ndarray     # [i, s] = (Y_i X1 1)_s
    N: int
    r0: int
    lam: float


@dataclass
class TdChain:
    matrix: SparseStochasticMatrix
    frame: TdFrame
    blocks: TdBlocks
    N: int
    placement: str
    _steady: SteadyState | None = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.matrix.dimension

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.frame.frame_length, self.N + 1, self.N + 1, self.blocks.r0)

    def steady_state(self) -> SteadyState:
        if self._steady is None:
            self._steady = solve_steady_state(self.matrix)
        return self._steady


@dataclass(frozen=True)
class TdMetrics:
    L_bar: float
    lambda_eff: float
    peak_aoii: float
    loss_rate: float
    mean_q1: float
    mean_q2: float


def capped_arrival_row(base: int, N: int, lam: float) -> np.ndarray:
    """Distribution of ``min(base + A, N)`` over ``0..N`` with ``A ~ Poisson(lam)``."""
    row = np.zeros(N + 1)
    if base >= N:
        row[N] = 1.0
        return row
    span = N - base
    row[base:N] = poisson_pmf_vector(lam, span - 1)
    row[N] = poisson_tail(lam, span)
    return row


def _selector(i: int, row: np.ndarray) -> sp.csr_matrix:
    n = row.size
    nz = np.flatnonzero(row)
    return sp.csr_matrix((row[nz], (np.full(nz.size, i), nz)), shape=(n, n))


def td_block_matrices(cra: CraSpec, lam: float, N: int) -> TdBlocks:
    """Blocks ``B`` (success), ``A0`` (no success) and ``A1`` (no reservation)."""
    if N < 1:
        raise InvalidParameterError(f"N must be >= 1, got {N}")
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    if cra.n_max < N:
        raise InvalidParameterError(f"CRA admits {cra.n_max} queued signals, the chain needs N={N}")
    r0 = cra.size
    X0, X1 = sp.csr_matrix(cra.X0), sp.csr_matrix(cra.X1)
    eye = sp.identity(r0, format="csr")
    B = sp.csr_matrix(((N + 1) * r0, (N + 1) * r0))
    A0 = B.copy()
    A1 = B.copy()
    m0 = np.zeros((N + 1, r0))
    m1 = np.zeros((N + 1, r0))
    for i in range(N + 1):
        Y = cra.Y(i)
        YX0, YX1 = (Y @ X0).tocsr(), (Y @ X1).tocsr()
        m0[i] = np.asarray(YX0.sum(axis=1)).ravel()
        m1[i] = np.asarray(YX1.sum(axis=1)).ravel()
        # rows with q1 = 0 and a non-idle CRA state are unreachable; route any
        # success mass there to q1 = 0 so the row stays stochastic
        B = B + sp.kron(_selector(i, capped_arrival_row(max(i - 1, 0), N, lam)), YX1)
        A0 = A0 + sp.kron(_selector(i, capped_arrival_row(i, N, lam)), YX0)
        A1 = A1 + sp.kron(_selector(i, capped_arrival_row(i, N, lam)), eye)
    return TdBlocks(B.tocsr(), A0.tocsr(), A1.tocsr(), m0, m1, N, r0, lam)


def _L(N: int, kind: str) -> sp.csr_matrix:
    n = N + 1
    if kind == "L1":  # q2 < N, no success
        return sp.diags(np.r_[np.ones(N), 0.0], format="csr")
    if kind == "L2":  # q2 -> q2 + 1
        return sp.eye(n, n, k=1, format="csr")
    if kind == "L3":  # q2 == N frozen
        return sp.csr_matrix(([1.0], ([N], [N])), shape=(n, n))
    if kind == "L4":  # q2 -> (q2 - 1)^+
        rows = np.arange(n)
        cols = np.maximum(rows - 1, 0)
        return sp.csr_matrix((np.ones(n), (rows, cols)), shape=(n, n))
    raise ValueError(kind)


def assemble_td_chain(frame: TdFrame, blocks: TdBlocks, N: int | None = None, *,
                      placement: str = "completion", max_states: int = DEFAULT_MAX_STATES) -> TdChain:
    """Assemble the frame-cyclic chain over ``(t_d, q2, q1, s)``."""
    N = blocks.N if N is None else N
    if N != blocks.N:
        raise ModelConstructionError(f"blocks built for N={blocks.N}, chain asked for N={N}")
    T = frame.frame_length
    inner = (N + 1) ** 2 * blocks.r0
    if T * inner > max_states:
        raise StateSpaceTooLargeError(f"TD chain needs {T * inner} states (> {max_states})")
    C1 = (sp.kron(_L(N, "L1"), blocks.A0) + sp.kron(_L(N, "L2"), blocks.B)
          + sp.kron(_L(N, "L3"), blocks.A1)).tocsr()
    C_hold = sp.kron(sp.identity(N + 1, format="csr"), blocks.A1).tocsr()
    C_depart = sp.kron(_L(N, "L4"), blocks.A1).tocsr()
    departures = frame.completion_slots(placement)
    grid = [[None] * T for _ in range(T)]
    for t in range(1, T + 1):
        if t <= frame.Z1:
            Dt = C1
        elif t in departures:
            Dt = C_depart
        else:
            Dt = C_hold
        grid[t - 1][t % T] = Dt
    if T == 1:
        D = grid[0][0]
    else:
        D = sp.bmat(grid, format="csr")
    return TdChain(SparseStochasticMatrix(D), frame, blocks, N, placement)


def td_metrics(chain: TdChain, lam: float | None = None) -> TdMetrics:
    """Mean occupancy, accepted arrival rate, peak AoII and loss of a TD chain."""
    lam = chain.blocks.lam if lam is None else lam
    if lam <= 0:
        raise InvalidParameterError("lambda must be positive to compute peak AoII")
    T, n2, n1, r0 = chain.shape
    N = chain.N
    pi = chain.steady_state().probabilities.reshape(T, n2, n1, r0)
    q = np.arange(N + 1)
    marg = pi.sum(axis=(0, 3))  # [q2, q1]
    mean_q2 = float(marg.sum(axis=1) @ q)
    mean_q1 = float(marg.sum(axis=0) @ q)

    # q1 after the reservation step, before arrivals
    post = np.zeros(N + 1)
    Z1 = chain.frame.Z1
    res = pi[:Z1]
    contend = res[:, :N].sum(axis=(0, 1))  # [q1, s]
    m0, m1 = chain.blocks.no_success_mass, chain.blocks.success_mass
    stay = (contend * m0).sum(axis=1)
    down = (contend * m1).sum(axis=1)
    post += stay
    post[:-1] += down[1:]
    post[0] += down[0]
    post += res[:, N].sum(axis=(0, 2))
    post += pi[Z1:].sum(axis=(0, 1, 3))

    mean_accept = np.empty(N + 1)
    for i in range(N + 1):
        room = N - i
        pmf = poisson_pmf_vector(lam, max(room - 1, 0))[:room]
        mean_accept[i] = float(np.arange(room) @ pmf) + room * poisson_tail(lam, room)
    lam_eff = float(post @ mean_accept)
    if lam_eff <= 0:
        raise ModelConstructionError("accepted arrival rate is zero")
    L = mean_q1 + mean_q2
    return TdMetrics(L, lam_eff, L / lam_eff, 1.0 - lam_eff / lam, mean_q1, mean_q2)


def make_cra(kind: str, N: int, R: int = 3) -> CraSpec:
    if kind == "tree":
        return tree_splitting_cra(N, R)
    if kind == "aloha":
        return aloha_cra(N)
    raise InvalidParameterError(f"unknown CRA kind {kind!r}")


def analyze_td(Z1: int, Z2: int, c: int, N: int, lam: float, *, cra: str = "tree", R: int = 3,
               placement: str = "completion") -> TdMetrics:
    """Build, solve and summarise a TD chain in one call."""
    frame = TdFrame(Z1, Z2, c)
    blocks = td_block_matrices(make_cra(cra, N, R), lam, N)
    return td_metrics(assemble_td_chain(frame, blocks, N, placement=placement), lam)


__all__ = [
    "TdBlocks", "TdChain", "TdFrame", "TdMetrics", "analyze_td", "assemble_td_chain",
    "capped_arrival_row", "make_cra", "td_block_matrices", "td_metrics",
]
