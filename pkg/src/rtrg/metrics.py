"""Temporal entanglement: Renyi-2 entropy with pairing-function reduced states."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import MemoryKernel, SpectralDensity, eval_memory
from .modes import build_K, fastest_decoupling_basis, ModeStream
from .tape import TapeModel

MAX_CELLS = 8
MAX_OCCUPATION = 2


def closed_form_entropy(m0: float, coupling_sq: float) -> float:
    """S = 2 log(p1 + p2) - log(p1^2 + p2^2) with p1 : p2 = M(0) : |M_pq|^2."""
    m0 = float(np.real(m0))
    total = m0 + coupling_sq
    if total <= 0:
        return 0.0
    p1, p2 = m0 / total, coupling_sq / total
    # p1 + p2 = 1 and p1^2 + p2^2 = 1 - 2 p1 p2; log1p keeps the far tail accurate
    return float(-np.log1p(-2 * p1 * p2))


def _m0(kernel) -> float:
    if isinstance(kernel, MemoryKernel):
        return float(np.real(kernel.m0))
    return float(np.real(kernel.memory(0.0)))


def entanglement_entropy_2q(kernel: MemoryKernel | SpectralDensity, tau_gap) -> np.ndarray | float:
    """Renyi-2 entropy of psi_p^dag psi_q^dag |0> split between the two cells."""
    gap = np.asarray(tau_gap, dtype=float)
    if np.any(gap < 0):
        raise ValueError("tau_gap must be >= 0")
    m_pq = eval_memory(kernel, gap)
    m0 = _m0(kernel)
    out = np.vectorize(lambda c: closed_form_entropy(m0, abs(c) ** 2))(np.atleast_1d(m_pq))
    return float(out[0]) if gap.ndim == 0 else out


def mode_couplings(kernel: MemoryKernel, p: int, n_modes: int, stream: ModeStream | None = None) -> np.ndarray:
    """(p|M|phi_k) for k = 1..n_modes, phi_k ordered by descending future coupling.

    With a stream and n_modes <= m the stored couplings are used; otherwise
    the eigenvectors of K(p) are computed directly.
    """
    if stream is not None and n_modes <= stream.m and p <= stream.n_steps - 1 and p >= stream.m:
        return stream.couplings[p, :n_modes].copy()
    K = build_K(kernel, p)
    vals, vecs = fastest_decoupling_basis(K, min(n_modes, p))
    row = kernel.lags(p + 1)[p:0:-1]  # M((p - r) dt), r = 0..p-1
    out = np.zeros(n_modes, dtype=complex)
    n = vecs.shape[1]
    out[:n] = row @ vecs
    return out


def entanglement_entropy_mode(kernel: MemoryKernel, stream: ModeStream | None, p: int, k) -> np.ndarray | float:
    """Closed-form entropy with M_pq replaced by the mode coupling (p|M|phi_k); k is 1-based."""
    ks = np.atleast_1d(np.asarray(k, dtype=int))
    if np.any(ks < 1):
        raise IndexError("mode index k is 1-based")
    couplings = mode_couplings(kernel, p, int(ks.max()), stream)
    m0 = _m0(kernel)
    out = np.array([closed_form_entropy(m0, abs(couplings[i - 1]) ** 2) for i in ks])
    return float(out[0]) if np.ndim(k) == 0 else out


@dataclass(frozen=True)
class BipartiteSplit:
    """Cells 0..p-1; A is the system plus the most recent q cells, B the rest."""

    p: int
    q: int

    def __post_init__(self):
        if not 0 <= self.q < self.p:
            raise ValueError("need 0 <= q < p")

    @property
    def cells_a(self):
        return list(range(self.p - self.q, self.p))

    @property
    def cells_b(self):
        return list(range(self.p - self.q))


def reduced_state_a(tape: TapeModel, state: np.ndarray, split: BipartiteSplit) -> np.ndarray:
    """rho_A: pair B with itself and A with B, project B to vacuum, keep A quantum numbers."""
    if split.p > tape.n_cells:
        raise ValueError("split uses more cells than the tape holds")
    rho = np.outer(state, np.conj(state))
    cells = split.cells_a + split.cells_b
    paired = tape.pair_all(rho, cells, skip=split.cells_a)
    keep = np.ones(tape.basis.dim, dtype=bool)
    for c in split.cells_b:
        keep &= tape.basis.vacuum_mask(c)
    for c in range(split.p, tape.n_cells):
        keep &= tape.basis.vacuum_mask(c)
    return paired[np.ix_(keep, keep)]


def renyi2_from_operator(rho_a: np.ndarray) -> float:
    """S = 2 log Tr|rho_A| - log Tr|rho_A|^2 for a Hermitian, possibly indefinite rho_A."""
    lam = np.linalg.eigvalsh(0.5 * (rho_a + rho_a.conj().T))
    l1 = np.sum(np.abs(lam))
    l2 = np.sum(lam**2)
    if l1 == 0:
        raise ZeroDivisionError("reduced state vanishes")
    return float(max(0.0, 2 * np.log(l1) - np.log(l2)))


def renyi2_entropy_general(state: np.ndarray, split: BipartiteSplit, kernel, *, d_sys: int = 1,
                           n_cells: int | None = None, n_max: int = MAX_OCCUPATION) -> float:
    """Renyi-2 entropy of a small tape wavefunction for the given split.

    ``kernel`` is a MemoryKernel or a sequence of lags M(k dt).  The state
    lives in the tape basis (d_sys, n_cells, n_max).
    """
    n_cells = split.p if n_cells is None else n_cells
    if n_cells > MAX_CELLS or n_max > MAX_OCCUPATION:
        raise ValueError(f"dense Renyi-2 is limited to {MAX_CELLS} cells and n_max <= {MAX_OCCUPATION}")
    tape = TapeModel(kernel, d_sys, n_cells, n_max)
    state = np.asarray(state, dtype=complex)
    if state.shape != (tape.basis.dim,):
        raise ValueError(f"state must have length {tape.basis.dim}")
    return renyi2_from_operator(reduced_state_a(tape, state, split))


def two_quanta_state(tape: TapeModel, cell_a: int, cell_b: int) -> np.ndarray:
    """psi_a^dag psi_b^dag |0> (system in its first basis state)."""
    occ = [0] * tape.n_cells
    occ[cell_a] += 1
    occ[cell_b] += 1
    state = np.zeros(tape.basis.dim, dtype=complex)
    state[tape.basis.index((0, *occ))] = 1.0
    if cell_a == cell_b:
        state *= np.sqrt(2.0)
    return state


def entropy_slope(kernel, gaps) -> float:
    """Least-squares slope of log S against log gap."""
    gaps = np.asarray(gaps, dtype=float)
    S = np.asarray(entanglement_entropy_2q(kernel, gaps))
    return float(np.polyfit(np.log(gaps), np.log(S), 1)[0])
