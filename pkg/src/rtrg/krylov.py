"""Lanczos propagation of the many-body disentangler exp(i H_W).

H_W = sum_kl b_k^dagger h_kl b_l is number conserving and Hermitian, so the
short recurrence with full reorthogonalization gives an accurate small
tridiagonal representation.  Columns of a state stack are propagated
independently, each with its own stopping point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fock import FockBasis


class KrylovError(ArithmeticError):
    """Budget exhausted before the propagated state converged."""

    def __init__(self, last_change: float, budget: int):
        self.last_change = float(last_change)
        self.budget = budget
        super().__init__(
            f"Krylov budget {budget} exhausted; last squared change {self.last_change:.3e}"
        )


@dataclass(frozen=True)
class KrylovConfig:
    max_budget: int = 16
    hop_threshold: float = 1e-5
    lindep_threshold: float = 1e-4
    conv_threshold: float = 1e-3

    def __post_init__(self):
        if self.max_budget < 1:
            raise ValueError("max_budget must be >= 1")
        for name in ("hop_threshold", "lindep_threshold", "conv_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def tight(cls) -> "KrylovConfig":
        """Thresholds near machine precision, for reference-quality runs."""
        return cls(max_budget=64, hop_threshold=1e-28, lindep_threshold=1e-26, conv_threshold=1e-26)


@dataclass
class LanczosTrace:
    """Recurrence coefficients of the last single-column run (diagnostics)."""

    alpha: np.ndarray
    beta: np.ndarray
    stop_reason: str


def generator_operator(h, basis: FockBasis) -> sp.csr_matrix:
    return basis.quadratic(h)


def _tridiagonal_propagate(beta, alpha):
    """exp(i T) e_0 for stacked tridiagonals; beta (B, n), alpha (B, n-1)."""
    n = beta.shape[1]
    T = np.zeros((beta.shape[0], n, n))
    idx = np.arange(n)
    T[:, idx, idx] = beta
    if n > 1:
        T[:, idx[:-1], idx[1:]] = alpha
        T[:, idx[1:], idx[:-1]] = alpha
    w, u = np.linalg.eigh(T)
    return np.einsum("bik,bk,bk->bi", u, np.exp(1j * w), u[:, 0, :].conj())


def _propagate_columns(H, X, cfg: KrylovConfig, trace: list | None = None):
    n_dim, n_cols = X.shape
    out = np.zeros_like(X)
    norms = np.linalg.norm(X, axis=0)
    active = np.flatnonzero(norms > 0)
    if active.size == 0:
        return out
    budget = cfg.max_budget
    V = np.zeros((budget + 2, n_dim, active.size), dtype=complex)
    V[0] = X[:, active] / norms[active]
    betas = np.zeros((active.size, budget + 1))
    alphas = np.zeros((active.size, budget + 1))
    prev = np.zeros((active.size, 0), dtype=complex)
    live = np.ones(active.size, dtype=bool)
    last_change = np.full(active.size, np.inf)
    reason = np.array([""] * active.size, dtype=object)

    def finish(cols, k):
        if cols.size == 0:
            return
        y = _tridiagonal_propagate(betas[cols, : k + 1], alphas[cols, :k])
        vecs = np.einsum("knb,bk->nb", V[: k + 1][:, :, cols], y)
        out[:, active[cols]] = vecs * norms[active[cols]]
        live[cols] = False

    for k in range(budget + 1):
        cols = np.flatnonzero(live)
        if cols.size == 0:
            break
        Vk = V[k][:, cols]
        w = H @ Vk
        betas[cols, k] = np.real(np.einsum("nb,nb->b", Vk.conj(), w))
        w = w - Vk * betas[cols, k]
        if k > 0:
            w = w - V[k - 1][:, cols] * alphas[cols, k - 1]
        raw = np.linalg.norm(w, axis=0)
        # full reorthogonalization, twice for stability
        for _ in range(2):
            coef = np.einsum("knb,nb->kb", V[: k + 1][:, :, cols].conj(), w)
            w = w - np.einsum("knb,kb->nb", V[: k + 1][:, :, cols], coef)
        a = np.linalg.norm(w, axis=0)
        alphas[cols, k] = a
        # convergence of the propagated state against the previous order
        y = _tridiagonal_propagate(betas[cols, : k + 1], alphas[cols, :k])
        padded = np.zeros_like(y)
        padded[:, :k] = prev[cols]
        change = np.sum(np.abs(y - padded) ** 2, axis=1)
        last_change[cols] = change
        stop_hop = a**2 < cfg.hop_threshold
        # fraction of the new direction surviving reorthogonalization
        stop_lin = a**2 < cfg.lindep_threshold * np.maximum(raw, np.finfo(float).tiny) ** 2
        stop_conv = (change < cfg.conv_threshold) & (k > 0)
        stop = stop_hop | stop_lin | stop_conv
        reason[cols[stop_conv]] = "converged"
        reason[cols[stop_lin]] = "linear dependence"
        reason[cols[stop_hop]] = "hop"
        grown = np.zeros((active.size, k + 1), dtype=complex)
        grown[:, : prev.shape[1]] = prev
        grown[cols] = y
        prev = grown
        finish(cols[stop], k)
        cont = cols[~stop]
        if cont.size and k < budget:
            V[k + 1][:, cont] = w[:, ~stop] / a[~stop]
    if live.any():
        raise KrylovError(float(np.max(last_change[live])), budget)
    if trace is not None and active.size:
        trace.append(LanczosTrace(alphas[0].copy(), betas[0].copy(), str(reason[0])))
    return out


def apply_bogoliubov(h, basis: FockBasis, state, cfg: KrylovConfig | None = None, *, generator=None,
                     trace: list | None = None):
    """exp(i H_W) applied to a state vector or to each column of an N x k stack.

    Each column is normalized for the recurrence and rescaled afterwards.
    Pass ``generator`` to reuse a prebuilt H_W.
    """
    cfg = cfg or KrylovConfig()
    h = np.asarray(h, dtype=complex)
    if not np.allclose(h, h.conj().T, atol=1e-12):
        raise ValueError("generator h must be Hermitian")
    state = np.asarray(state, dtype=complex)
    single = state.ndim == 1
    X = state[:, None] if single else state
    if X.shape[0] != basis.dim:
        raise ValueError(f"state dimension {X.shape[0]} does not match basis dimension {basis.dim}")
    if not np.any(h):
        return state.copy()
    H = generator if generator is not None else basis.quadratic(h)
    out = _propagate_columns(H, X, cfg, trace)
    return out[:, 0] if single else out


def apply_bogoliubov_dm(h, basis: FockBasis, rho, cfg: KrylovConfig | None = None, *, generator=None):
    """W rho W^dagger via two columnwise passes sharing one H_W."""
    h = np.asarray(h, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    if not np.any(h):
        return rho.copy()
    H = generator if generator is not None else basis.quadratic(h)
    left = apply_bogoliubov(h, basis, rho, cfg, generator=H)
    both = apply_bogoliubov(h, basis, left.conj().T, cfg, generator=H)
    # both = W (W rho)^dagger = W rho^dagger W^dagger
    return 0.5 * (both + both.conj().T)


# --------------------------------------------------------------------------
# exact route: H_W conserves the total occupation, so exp(i H_W) is block
# diagonal over occupation sectors and each block is small
# --------------------------------------------------------------------------
class SectorUnitary:
    """exp(i H_W) on the mode Fock space, stored as one dense block per sector.

    exp(i H_W) b_j^dag exp(-i H_W) = sum_i u_ij b_i^dag with u = exp(i h), so
    the sector-n columns follow from sector n-1 by one creation step.
    """

    def __init__(self, h, basis: FockBasis):
        h = np.asarray(h, dtype=complex)
        if not np.allclose(h, h.conj().T, atol=1e-12):
            raise ValueError("generator h must be Hermitian")
        self.basis = basis
        w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
        u = (v * np.exp(1j * w)) @ v.conj().T
        d = basis.d_sys
        occ = basis.occ
        totals = occ.sum(axis=1)
        raising = [basis.raise_(i)[::d, ::d].tocsr() for i in range(basis.n_modes)]
        sectors = [np.flatnonzero(totals == n) for n in range(basis.n_max + 1)]
        self.blocks = [(sectors[0], np.ones((1, 1), dtype=complex))]
        for n in range(1, basis.n_max + 1):
            idx, prev = sectors[n], sectors[n - 1]
            where_prev = {int(k): c for c, k in enumerate(prev)}
            prev_block = self.blocks[-1][1]
            creators = [r[np.ix_(idx, prev)] for r in raising]
            block = np.empty((len(idx), len(idx)), dtype=complex)
            first = np.argmax(occ[idx] > 0, axis=1)  # mode taken off to reach the parent state
            for j in np.unique(first):
                cols = np.flatnonzero(first == j)
                parents = occ[idx[cols]].copy()
                parents[:, j] -= 1
                pcols = [where_prev[basis._occ_index[tuple(t)]] for t in parents]
                lift = sum(u[i, j] * creators[i] for i in range(basis.n_modes) if u[i, j] != 0)
                block[:, cols] = (lift @ prev_block[:, pcols]) / np.sqrt(occ[idx[cols], j])
            self.blocks.append((idx, block))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """U X for a vector or an N x k stack (system index fastest)."""
        b = self.basis
        single = X.ndim == 1
        Y = X.reshape(b.n_occ, -1)
        out = np.empty_like(Y, dtype=complex)
        for idx, U in self.blocks:
            out[idx] = U @ Y[idx]
        out = out.reshape(X.shape)
        return out if not single else out.reshape(-1)

    def conjugate(self, rho: np.ndarray) -> np.ndarray:
        """U rho U^dagger."""
        left = self.apply(rho)
        return self.apply(left.conj().T).conj().T


def apply_bogoliubov_exact(h, basis: FockBasis, state):
    """exp(i H_W) by dense exponentiation of each occupation sector."""
    state = np.asarray(state, dtype=complex)
    if state.shape[0] != basis.dim:
        raise ValueError(f"state dimension {state.shape[0]} does not match basis dimension {basis.dim}")
    return SectorUnitary(h, basis).apply(state)


def apply_bogoliubov_dm_exact(h, basis: FockBasis, rho):
    out = SectorUnitary(h, basis).conjugate(np.asarray(rho, dtype=complex))
    return 0.5 * (out + out.conj().T)
