"""Reference solvers: truncated chain and star baths, and a Lindblad propagator.

All three use the implicit midpoint rule so that their time discretization
matches the RG flows.  Bath solvers keep the full system plus bath
wavefunction and take the literal partial trace.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fock import FockBasis, basis_size
from .kernel import SpectralDensity

ORACLE_MAX_DIM = 400_000


@dataclass
class OracleResult:
    times: np.ndarray
    rho_s: np.ndarray  # (n_t, d, d)

    def expectation(self, op) -> np.ndarray:
        op = np.asarray(op, dtype=complex)
        return np.real(np.einsum("tij,ji->t", self.rho_s, op))


def _system_at(H_s, t):
    return np.asarray(H_s(t) if callable(H_s) else H_s, dtype=complex)


def _initial_vector(psi0, d):
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (d,):
        raise ValueError(f"initial system state must have length {d}")
    return psi0 / np.linalg.norm(psi0)


def _reduced(psi, basis: FockBasis):
    x = psi.reshape(basis.n_occ, basis.d_sys)
    return x.T @ x.conj()


def propagate_bath(basis: FockBasis, H_bath: sp.spmatrix, coupling: sp.spmatrix, H_s, s_op, psi0,
                   dt: float, t_end: float, *, tol: float = 1e-13, max_iters: int = 100) -> OracleResult:
    """Midpoint propagation of H_s(t) + H_bath + s^dag B + s B^dag.

    ``coupling`` is the bath operator B (already embedded).  The static part
    is factorized once; the time-dependent remainder of H_s is handled by a
    fixed-point correction inside each step.
    """
    d = basis.d_sys
    n_steps = int(round(t_end / dt))
    taus = (np.arange(n_steps) + 0.5) * dt
    if callable(H_s):
        sys_at = [_system_at(H_s, t) for t in taus]
        H_ref = np.mean(sys_at, axis=0) if sys_at else _system_at(H_s, 0.0)
    else:
        H_ref = _system_at(H_s, 0.0)
        sys_at = None
    s_op = np.asarray(s_op, dtype=complex)
    H_static = (basis.embed(H_ref) + H_bath + basis.embed(s_op.conj().T) @ coupling
                + basis.embed(s_op) @ coupling.conj().T).tocsc()
    eye = sp.identity(basis.dim, format="csc", dtype=complex)
    lu = spla.splu((eye + 0.5j * dt * H_static).tocsc())
    explicit = (eye - 0.5j * dt * H_static).tocsr()

    psi = np.zeros(basis.dim, dtype=complex)
    psi[:d] = _initial_vector(psi0, d)
    rho_s = np.zeros((n_steps + 1, d, d), dtype=complex)
    rho_s[0] = _reduced(psi, basis)
    for p in range(n_steps):
        rhs = explicit @ psi
        new = lu.solve(rhs)
        if sys_at is not None:
            delta = sys_at[p] - H_ref
            if np.any(delta):
                dH = basis.embed(delta)
                for _ in range(max_iters):
                    nxt = lu.solve(rhs - 0.5j * dt * (dH @ (new + psi)))
                    change = np.max(np.abs(nxt - new))
                    new = nxt
                    if change <= tol:
                        break
                else:
                    raise ArithmeticError(f"drive correction did not converge at step {p}")
        psi = new
        rho_s[p + 1] = _reduced(psi, basis)
    return OracleResult(dt * np.arange(n_steps + 1), rho_s)


def _check_dim(d, n_modes, n_max, max_dim):
    size = basis_size(d, n_modes, n_max)
    if size > max_dim:
        raise MemoryError(f"oracle dimension {size} exceeds the budget {max_dim}")


def chain_basis(d_sys: int, L_sites: int, n_max: int, max_dim: int = ORACLE_MAX_DIM) -> FockBasis:
    _check_dim(d_sys, L_sites, n_max, max_dim)
    return FockBasis(d_sys, L_sites, n_max, max_dim=max_dim)


def exact_waveguide(H_s, s_op, eps: float, h: float, L_sites: int, n_max: int, dt: float, t_end: float,
                    psi0=None, *, max_dim: int = ORACLE_MAX_DIM) -> OracleResult:
    """System coupled to the first site of an L-site tight-binding chain.

    The chain has on-site energy eps and hopping h, so its first-site
    correlation is the waveguide memory function up to finite-size echoes.
    """
    if L_sites < 2:
        raise ValueError("need at least two chain sites")
    s_op = np.asarray(s_op, dtype=complex)
    d = s_op.shape[0]
    basis = chain_basis(d, L_sites, n_max, max_dim)
    hop = np.diag(np.full(L_sites, eps, dtype=complex))
    idx = np.arange(L_sites - 1)
    hop[idx + 1, idx] = h
    hop[idx, idx + 1] = h
    H_bath = basis.quadratic(hop)
    psi0 = _default_excited(d) if psi0 is None else psi0
    return propagate_bath(basis, H_bath, basis.lower(0), H_s, s_op, psi0, dt, t_end)


def star_grid(density: SpectralDensity, t_end: float, n_omega: int | None = None,
              omega_max: float | None = None, d_omega: float | None = None):
    """Midpoint frequency grid and couplings g_k = sqrt(J(w_k) dw / pi)."""
    if d_omega is None:
        d_omega = 2 * np.pi / (4 * max(t_end, 1e-12))
    if n_omega is None:
        lo, hi = density.support()
        top = hi if omega_max is None else omega_max
        n_omega = max(1, int(np.ceil(top / d_omega)))
    omega = (np.arange(n_omega) + 0.5) * d_omega
    g = np.sqrt(density.spectral(omega) * d_omega / np.pi)
    return omega, g


def exact_star(H_s, s_op, density: SpectralDensity, N_omega: int, n_max: int, dt: float, t_end: float,
               psi0=None, *, omega_max: float | None = None, max_dim: int = ORACLE_MAX_DIM) -> OracleResult:
    """System coupled to N_omega discrete bath modes on the midpoint frequency grid.

    The grid spans [0, omega_max] (default: the density's support) with
    spacing omega_max / N_omega.
    """
    s_op = np.asarray(s_op, dtype=complex)
    d = s_op.shape[0]
    top = density.support()[1] if omega_max is None else omega_max
    d_omega = top / N_omega
    omega, g = star_grid(density, t_end, n_omega=N_omega, d_omega=d_omega)
    keep = g > 0
    omega, g = omega[keep], g[keep]
    _check_dim(d, len(omega), n_max, max_dim)
    basis = FockBasis(d, len(omega), n_max, max_dim=max_dim)
    H_bath = basis.quadratic(np.diag(omega.astype(complex)))
    coupling = sum(gk * basis.lower(k) for k, gk in enumerate(g))
    psi0 = _default_excited(d) if psi0 is None else psi0
    return propagate_bath(basis, H_bath, coupling, H_s, s_op, psi0, dt, t_end)


def _default_excited(d):
    psi = np.zeros(d, dtype=complex)
    psi[-1] = 1
    return psi


def lindblad(H_s, L_op, gamma: float, dt: float, t_end: float, rho0) -> OracleResult:
    """Midpoint integration of d rho/dt = -i[H, rho] + gamma (L rho L^dag - {L^dag L, rho}/2)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    L_op = np.asarray(L_op, dtype=complex)
    d = L_op.shape[0]
    rho = np.asarray(rho0, dtype=complex)
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    eye = np.eye(d)
    LdL = L_op.conj().T @ L_op
    # row-major vec: vec(A X B) = kron(A, B^T) vec(X)
    jump = gamma * (np.kron(L_op, L_op.conj()) - 0.5 * np.kron(LdL, eye) - 0.5 * np.kron(eye, LdL.T))

    def generator(t):
        H = _system_at(H_s, t)
        return -1j * (np.kron(H, eye) - np.kron(eye, H.T)) + jump

    n_steps = int(round(t_end / dt))
    out = np.zeros((n_steps + 1, d, d), dtype=complex)
    out[0] = rho
    big = np.eye(d * d)
    static = None if callable(H_s) else generator(0.0)
    for p in range(n_steps):
        S = static if static is not None else generator((p + 0.5) * dt)
        vec = np.linalg.solve(big - 0.5 * dt * S, (big + 0.5 * dt * S) @ rho.reshape(-1))
        rho = vec.reshape(d, d)
        out[p + 1] = rho
    return OracleResult(dt * np.arange(n_steps + 1), out)
