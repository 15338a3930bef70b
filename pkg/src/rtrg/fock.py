"""Truncated bosonic Fock basis (total occupation <= n_max) tensored with a system.

Basis states are labelled (q, n_1..n_M).  Occupation tuples are listed in
ascending lexicographic order and the system index varies fastest, so the
flat index is ``k * d_sys + q``.  The all-vacuum tuple is k = 0.

Public functions take 1-based mode numbers; ``FockBasis`` methods take
0-based slots.
"""
from __future__ import annotations

from functools import cached_property
from math import comb

import numpy as np
import scipy.sparse as sp

DEFAULT_MAX_DIM = 2_000_000


def _occupations(n_modes: int, n_max: int):
    """All tuples with sum <= n_max, ascending lexicographic order."""
    out = []

    def rec(prefix, left, remaining_modes):
        if remaining_modes == 0:
            out.append(tuple(prefix))
            return
        for n in range(left + 1):
            prefix.append(n)
            rec(prefix, left - n, remaining_modes - 1)
            prefix.pop()

    rec([], n_max, n_modes)
    return out


def basis_size(d_sys: int, n_modes: int, n_max: int) -> int:
    return d_sys * comb(n_modes + n_max, n_modes)


class FockBasis:
    def __init__(self, d_sys: int, n_modes: int, n_max: int, max_dim: int = DEFAULT_MAX_DIM):
        if d_sys < 1 or n_modes < 1 or n_max < 0:
            raise ValueError("need d_sys >= 1, n_modes >= 1, n_max >= 0")
        size = basis_size(d_sys, n_modes, n_max)
        if size > max_dim:
            raise MemoryError(f"Fock basis dimension N={size} exceeds the budget {max_dim}")
        self.d_sys = d_sys
        self.n_modes = n_modes
        self.n_max = n_max
        occ = _occupations(n_modes, n_max)
        self.occ = np.array(occ, dtype=np.int64).reshape(len(occ), n_modes)
        self._occ_index = {t: k for k, t in enumerate(occ)}
        self.n_occ = len(occ)
        self.dim = self.n_occ * d_sys

    # -- labels ----------------------------------------------------------
    def label(self, index: int):
        k, q = divmod(int(index), self.d_sys)
        return (q, *map(int, self.occ[k]))

    def index(self, label) -> int:
        q, *ns = label
        return self._occ_index[tuple(ns)] * self.d_sys + int(q)

    @cached_property
    def total_occupation(self) -> np.ndarray:
        """Total quanta of each flat basis state."""
        return np.repeat(self.occ.sum(axis=1), self.d_sys)

    def occupation(self, slot: int) -> np.ndarray:
        """n_slot of each flat basis state."""
        return np.repeat(self.occ[:, slot], self.d_sys)

    # -- operators -------------------------------------------------------
    def lower(self, slot: int) -> sp.csr_matrix:
        """Annihilator of mode ``slot`` (0-based)."""
        if not 0 <= slot < self.n_modes:
            raise IndexError(f"mode slot {slot} outside 0..{self.n_modes - 1}")
        return self._lowering[slot]

    def raise_(self, slot: int) -> sp.csr_matrix:
        return self._raising[slot]

    @cached_property
    def _lowering(self):
        ops = []
        d = self.d_sys
        for i in range(self.n_modes):
            rows, cols, vals = [], [], []
            for k, t in enumerate(map(tuple, self.occ)):
                n = t[i]
                if n == 0:
                    continue
                lowered = t[:i] + (n - 1,) + t[i + 1 :]
                kk = self._occ_index[lowered]
                rows.append(kk)
                cols.append(k)
                vals.append(np.sqrt(n))
            small = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_occ, self.n_occ))
            ops.append(sp.kron(small, sp.identity(d), format="csr").astype(complex))
        return ops

    @cached_property
    def _raising(self):
        return [a.conj().T.tocsr() for a in self._lowering]

    def embed(self, op_sys) -> sp.csr_matrix:
        op_sys = np.asarray(op_sys)
        if op_sys.shape != (self.d_sys, self.d_sys):
            raise ValueError(f"system operator must be {self.d_sys}x{self.d_sys}, got {op_sys.shape}")
        return sp.kron(sp.identity(self.n_occ), sp.csr_matrix(op_sys), format="csr").astype(complex)

    def vacuum_mask(self, slot: int) -> np.ndarray:
        return self.occupation(slot) == 0

    @cached_property
    def _hopping(self):
        # nonzero entries of b_k^dagger b_l for all (k, l), stacked once
        rows, cols, vals, pair = [], [], [], []
        n_modes = self.n_modes
        for k in range(n_modes):
            for l in range(n_modes):
                op = (self._raising[k] @ self._lowering[l]).tocoo()
                rows.append(op.row)
                cols.append(op.col)
                vals.append(op.data)
                pair.append(np.full(op.nnz, k * n_modes + l))
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), np.concatenate(pair)

    def quadratic(self, h) -> sp.csr_matrix:
        """sum_kl b_k^dagger h_kl b_l."""
        h = np.asarray(h, dtype=complex)
        if h.shape != (self.n_modes, self.n_modes):
            raise ValueError(f"generator must be {self.n_modes}x{self.n_modes}")
        rows, cols, vals, pair = self._hopping
        data = vals * h.ravel()[pair]
        return sp.csr_matrix((data, (rows, cols)), shape=(self.dim, self.dim))

    @property
    def vacuum_indices(self) -> np.ndarray:
        return np.arange(self.d_sys)


def build_basis(d_sys: int, n_modes: int, n_max: int, max_dim: int = DEFAULT_MAX_DIM) -> FockBasis:
    return FockBasis(d_sys, n_modes, n_max, max_dim)


def annihilator(basis: FockBasis, i: int) -> sp.csr_matrix:
    """a_i for 1-based mode number i."""
    if not 1 <= i <= basis.n_modes:
        raise IndexError(f"mode number {i} outside 1..{basis.n_modes}")
    return basis.lower(i - 1)


def creator(basis: FockBasis, i: int) -> sp.csr_matrix:
    if not 1 <= i <= basis.n_modes:
        raise IndexError(f"mode number {i} outside 1..{basis.n_modes}")
    return basis.raise_(i - 1)


def embed_system(basis: FockBasis, op_sys) -> sp.csr_matrix:
    return basis.embed(op_sys)


def vacuum_project(basis: FockBasis, x, i: int):
    """Zero every component with n_i != 0 (rows and columns for matrices)."""
    if not 1 <= i <= basis.n_modes:
        raise IndexError(f"mode number {i} outside 1..{basis.n_modes}")
    return project_slot(basis, x, i - 1)


def project_slot(basis: FockBasis, x, slot: int):
    keep = basis.vacuum_mask(slot)
    x = np.array(x, copy=True)
    if x.ndim == 1:
        x[~keep] = 0
    elif x.ndim == 2 and x.shape[0] == x.shape[1] == basis.dim:
        x[~keep, :] = 0
        x[:, ~keep] = 0
    elif x.ndim == 2 and x.shape[0] == basis.dim:
        # columns are independent states
        x[~keep, :] = 0
    else:
        raise ValueError("expected a state vector, a stack of state columns, or an N x N matrix")
    return x
