"""Brute-force tape model: every time cell is its own bosonic mode.

Only practical for a handful of cells.  Used as the reference for the RG
flows on finite-memory kernels and for entanglement of cell partitions.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .density_rg import MidpointError, midpoint_dm
from .fock import FockBasis


def _lag_table(kernel_or_lags, n_cells: int) -> np.ndarray:
    if hasattr(kernel_or_lags, "lags"):
        return np.asarray(kernel_or_lags.lags(n_cells + 1), dtype=complex)
    lags = np.zeros(n_cells + 1, dtype=complex)
    given = np.asarray(kernel_or_lags, dtype=complex)
    lags[: min(len(given), n_cells + 1)] = given[: n_cells + 1]
    return lags


class TapeModel:
    """System plus ``n_cells`` cell modes with total occupation <= n_max."""

    def __init__(self, kernel_or_lags, d_sys: int, n_cells: int, n_max: int):
        self.lags = _lag_table(kernel_or_lags, n_cells)
        self.n_cells = n_cells
        self.basis = FockBasis(d_sys, n_cells, n_max)

    def pairing_matrix(self, n: int | None = None) -> np.ndarray:
        """M_rs = M((r - s) dt) over cells 0..n-1."""
        n = self.n_cells if n is None else n
        k = np.subtract.outer(np.arange(n), np.arange(n))
        vals = self.lags[np.abs(k)]
        return np.where(k < 0, vals.conj(), vals)

    def hamiltonian(self, p: int, H_sys, s_op) -> sp.csr_matrix:
        b = self.basis
        absorbed = sp.csr_matrix((b.dim, b.dim), dtype=complex)
        for r in range(p + 1):
            c = self.lags[p - r]
            if c != 0:
                absorbed = absorbed + c * b.lower(r)
        s_dag = b.embed(np.asarray(s_op).conj().T)
        return (b.embed(H_sys) + b.embed(s_op) @ b.raise_(p) + s_dag @ absorbed).tocsr()

    def propagate_dm(self, H_s, s_op, rho_sys0, dt: float, n_steps: int, *, tol=1e-12, max_iters=200):
        """Full tape density matrices at t_0..t_n under the density-matrix midpoint rule."""
        if n_steps > self.n_cells:
            raise ValueError("more steps than cells")
        b = self.basis
        rho_sys0 = np.asarray(rho_sys0, dtype=complex)
        if rho_sys0.ndim == 1:
            rho_sys0 = np.outer(rho_sys0, rho_sys0.conj())
        rho = np.zeros((b.dim, b.dim), dtype=complex)
        rho[: b.d_sys, : b.d_sys] = rho_sys0
        out = [rho]
        for p in range(n_steps):
            H_sys = H_s((p + 0.5) * dt) if callable(H_s) else H_s
            rho = midpoint_dm(self.hamiltonian(p, H_sys, s_op), rho, dt, tol, max_iters)
            out.append(rho)
        return out

    def propagate_state(self, H_s, s_op, psi_sys0, dt: float, n_steps: int):
        """Pure-state midpoint rule, solved exactly by a sparse linear solve per step."""
        import scipy.sparse.linalg as spla

        b = self.basis
        psi = np.zeros(b.dim, dtype=complex)
        psi[: b.d_sys] = psi_sys0
        out = [psi]
        eye = sp.identity(b.dim, format="csc", dtype=complex)
        for p in range(n_steps):
            H_sys = H_s((p + 0.5) * dt) if callable(H_s) else H_s
            H = self.hamiltonian(p, H_sys, s_op).tocsc()
            psi = spla.spsolve(eye + 0.5j * dt * H, (eye - 0.5j * dt * H) @ psi)
            out.append(psi)
        return out

    def pair_all(self, rho: np.ndarray, cells, skip=()) -> np.ndarray:
        """exp(L) rho with L rho = sum_rs M_rs psi_s rho psi_r^dag over ``cells``.

        Pairs with both cells in ``skip`` are left out.  The series is finite
        because every term removes a quantum on each side.
        """
        b = self.basis
        cells = list(cells)
        skip = set(skip)
        if not cells:
            return rho.copy()
        Mrs = self.pairing_matrix()[np.ix_(cells, cells)]
        lowers = [b.lower(c) for c in cells]
        pairs = [(i, j) for i, r in enumerate(cells) for j, s_ in enumerate(cells)
                 if Mrs[i, j] != 0 and not (r in skip and s_ in skip)]

        def L(x):
            total = np.zeros_like(x)
            for i, j in pairs:
                left = lowers[j] @ x
                # left @ psi_r^dag
                total += Mrs[i, j] * (lowers[i].conj() @ left.T).T
            return total

        out = rho.copy()
        term = rho
        for order in range(1, 2 * b.n_max + 2):
            term = L(term) / order
            if not np.any(term):
                break
            out = out + term
        return out

    def vacuum_block(self, rho: np.ndarray, cells) -> np.ndarray:
        """Project the listed cells to vacuum on both sides."""
        keep = np.ones(self.basis.dim, dtype=bool)
        for c in cells:
            keep &= self.basis.vacuum_mask(c)
        out = np.zeros_like(rho)
        out[np.ix_(keep, keep)] = rho[np.ix_(keep, keep)]
        return out

    def reduced_system(self, rho: np.ndarray, p: int) -> np.ndarray:
        """System density matrix at t_p: pair cells 0..p-1 then project them out."""
        cells = range(p)
        paired = self.vacuum_block(self.pair_all(rho, cells), range(self.n_cells))
        d = self.basis.d_sys
        return paired[:d, :d]


__all__ = ["TapeModel", "MidpointError"]
