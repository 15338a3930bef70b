"""Renormalization-group flow of relevant density matrices.

One step p -> p+1 is entangle, pairing update, disentangle, oblivion.  The
relevant Fock space has m + 1 slots: slots 0..m-1 hold the relevant modes
and slot m receives the incoming cell and, after the disentangler, holds the
outgoing mode.  During the first m steps incoming cells fill slots 0..p and
nothing is discarded.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .fock import FockBasis
from .krylov import KrylovConfig, apply_bogoliubov_dm, apply_bogoliubov_dm_exact
from .modes import ModeStream

log = logging.getLogger(__name__)


class MidpointError(ArithmeticError):
    def __init__(self, residual: float, iterations: int):
        self.residual = float(residual)
        super().__init__(f"midpoint iteration did not converge: residual {residual:.3e} after {iterations} iterations")


@dataclass(frozen=True)
class RgConfig:
    m: int
    n_max: int
    dt: float
    t_end: float
    midpoint_tol: float = 1e-10
    midpoint_max_iters: int = 50
    krylov: KrylovConfig = field(default_factory=KrylovConfig.tight)
    # "exact": dense exponential per occupation sector; "krylov": Lanczos
    disentangler: str = "exact"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if not self.midpoint_tol > 0 or self.midpoint_max_iters < 1:
            raise ValueError("midpoint_tol must be positive and midpoint_max_iters >= 1")
        if self.disentangler not in ("exact", "krylov"):
            raise ValueError("disentangler must be 'exact' or 'krylov'")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class RelevantDensityMatrix:
    basis: FockBasis
    rho: np.ndarray
    p: int = 0

    @classmethod
    def initial(cls, basis: FockBasis, rho_sys) -> "RelevantDensityMatrix":
        rho_sys = np.asarray(rho_sys, dtype=complex)
        if rho_sys.ndim == 1:
            rho_sys = np.outer(rho_sys, rho_sys.conj())
        d = basis.d_sys
        rho = np.zeros((basis.dim, basis.dim), dtype=complex)
        rho[:d, :d] = rho_sys
        return cls(basis, rho, 0)


@dataclass(frozen=True)
class FluxRecord:
    t: float
    j_in: float
    j_out: float
    n_tot: float


def _hamiltonian_at(H_s, t):
    return np.asarray(H_s(t) if callable(H_s) else H_s, dtype=complex)


def step_hamiltonian(basis: FockBasis, stream: ModeStream, p: int, H_sys, s_op) -> sp.csr_matrix:
    """Non-Hermitian H_s + s psi_p^dag + s^dag (M(0) psi_p + sum_i M_i(p) phi_i)."""
    slot = stream.incoming_slot(p)
    s_full = basis.embed(s_op)
    absorbed = stream.m0 * basis.lower(slot)
    for i, c in enumerate(stream.couplings[p, : stream.n_relevant(p)]):
        if c != 0:
            absorbed = absorbed + c * basis.lower(i)
    s_dag = basis.embed(np.asarray(s_op).conj().T)
    return (basis.embed(H_sys) + s_full @ basis.raise_(slot) + s_dag @ absorbed).tocsr()


def midpoint_dm(H: sp.csr_matrix, rho: np.ndarray, dt: float, tol: float, max_iters: int) -> np.ndarray:
    """Solve rho1 = rho - i dt (H r - r H^dag), r = (rho1 + rho)/2, by iteration."""
    H_dag = H.conj().T.tocsr()
    new = rho.copy()
    residual = np.inf
    for it in range(1, max_iters + 1):
        half = 0.5 * (new + rho)
        nxt = rho - 1j * dt * (H @ half - (H_dag.T @ half.T).T)
        residual = np.max(np.abs(nxt - new))
        new = nxt
        if residual <= tol:
            return new
    raise MidpointError(residual, max_iters)


def entangle_step(state: RelevantDensityMatrix, stream: ModeStream, H_s, s_op, cfg: RgConfig) -> RelevantDensityMatrix:
    p = state.p
    H = step_hamiltonian(state.basis, stream, p, _hamiltonian_at(H_s, (p + 0.5) * cfg.dt), s_op)
    rho = midpoint_dm(H, state.rho, cfg.dt, cfg.midpoint_tol, cfg.midpoint_max_iters)
    return RelevantDensityMatrix(state.basis, rho, p)


def _pairing_term(basis: FockBasis, stream: ModeStream, p: int):
    slot = stream.incoming_slot(p)
    a = basis.lower(slot)
    a_dag = basis.raise_(slot)
    B = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
    for i, c in enumerate(stream.couplings[p, : stream.n_relevant(p)]):
        if c != 0:
            B = B + c * basis.lower(i)
    B_dag = B.conj().T.tocsr()
    m0 = stream.m0

    def apply(rho):
        a_rho = a @ rho
        # X @ op computed as (op^T @ X^T)^T to stay with sparse-left products
        return (m0 * (a_dag.T @ a_rho.T).T + (a_dag.T @ (B @ rho).T).T + (B_dag.T @ a_rho.T).T)

    return apply


def pairing_update(state: RelevantDensityMatrix, stream: ModeStream, cfg: RgConfig | None = None,
                   *, exact: bool = False) -> RelevantDensityMatrix:
    """rho0 + rho1 + rho2/2, or the full exponential series when ``exact``."""
    term = _pairing_term(state.basis, stream, state.p)
    out = state.rho.copy()
    current = state.rho
    order = 1
    max_order = 2 * state.basis.n_max + 1 if exact else 2
    while order <= max_order:
        current = term(current) / order
        if not np.any(current):
            break
        out += current
        order += 1
    out = 0.5 * (out + out.conj().T)
    return RelevantDensityMatrix(state.basis, out, state.p)


def disentangle_step(state: RelevantDensityMatrix, stream: ModeStream, cfg: RgConfig) -> RelevantDensityMatrix:
    p = state.p
    if p < stream.m:
        return state
    # occupation amplitudes transform with conj(W) = exp(i h^T)
    if cfg.disentangler == "krylov":
        rho = apply_bogoliubov_dm(stream.h[p].T, state.basis, state.rho, cfg.krylov)
    else:
        rho = apply_bogoliubov_dm_exact(stream.h[p].T, state.basis, state.rho)
    return RelevantDensityMatrix(state.basis, rho, p)


def oblivion_step(state: RelevantDensityMatrix, cfg: RgConfig, stream: ModeStream | None = None):
    """Record the outgoing flux and project the outgoing slot to vacuum."""
    basis = state.basis
    p = state.p
    m = stream.m if stream is not None else basis.n_modes - 1
    t = (p + 1) * cfg.dt
    diag = np.real(np.diag(state.rho))
    if p < m:
        j_out = 0.0
        rho = state.rho
    else:
        n_out = basis.occupation(m)
        j_out = float(diag @ n_out) / cfg.dt
        keep = n_out == 0
        rho = state.rho.copy()
        rho[~keep, :] = 0
        rho[:, ~keep] = 0
    record = FluxRecord(t=t, j_in=np.nan, j_out=j_out, n_tot=np.nan)
    return RelevantDensityMatrix(basis, rho, p + 1), record


def reduced_system_dm(state: RelevantDensityMatrix) -> np.ndarray:
    d = state.basis.d_sys
    block = state.rho[:d, :d]
    return 0.5 * (block + block.conj().T)


def trace_distance(rho1, rho2) -> float:
    diff = np.asarray(rho1, dtype=complex) - np.asarray(rho2, dtype=complex)
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))


def rg_step(state: RelevantDensityMatrix, stream: ModeStream, H_s, s_op, cfg: RgConfig, *, exact_pairing=False):
    """One full step; returns the new state and the flux record of the step."""
    basis = state.basis
    p = state.p
    entangled = entangle_step(state, stream, H_s, s_op, cfg)
    slot = stream.incoming_slot(p)
    diag = np.real(np.diag(entangled.rho))
    j_in = float(diag @ basis.occupation(slot)) / cfg.dt
    n_tot = float(diag @ basis.total_occupation)
    paired = pairing_update(entangled, stream, cfg, exact=exact_pairing)
    rotated = disentangle_step(paired, stream, cfg)
    new, record = oblivion_step(rotated, cfg, stream)
    return new, FluxRecord(t=record.t, j_in=j_in, j_out=record.j_out, n_tot=max(n_tot, 0.0))


@dataclass
class DensityRgResult:
    times: np.ndarray
    rho_s: np.ndarray
    raw_trace: np.ndarray
    fluxes: list
    observables: dict
    final_state: RelevantDensityMatrix


def run_density_rg(stream: ModeStream, H_s, s_op, rho0, cfg: RgConfig, *,
                   observables: Mapping[str, np.ndarray] | None = None,
                   exact_pairing: bool = False,
                   callback: Callable | None = None) -> DensityRgResult:
    """Propagate from t = 0 to cfg.t_end.

    Observables are reported as Tr(rho_s O) / Tr(rho_s); the raw trace is
    kept separately.
    """
    if abs(stream.dt - cfg.dt) > 1e-12 * cfg.dt:
        raise ValueError(f"stream dt {stream.dt} differs from config dt {cfg.dt}")
    if stream.m != cfg.m:
        raise ValueError(f"stream has m={stream.m}, config asks for m={cfg.m}")
    n_steps = cfg.n_steps
    if stream.n_steps < n_steps:
        raise ValueError(f"stream covers {stream.n_steps} steps, need {n_steps}")
    s_op = np.asarray(s_op, dtype=complex)
    d_sys = s_op.shape[0]
    basis = FockBasis(d_sys, cfg.m + 1, cfg.n_max)
    state = RelevantDensityMatrix.initial(basis, rho0)
    observables = dict(observables or {})

    rho_s = np.zeros((n_steps + 1, d_sys, d_sys), dtype=complex)
    rho_s[0] = reduced_system_dm(state)
    fluxes = []
    for p in range(n_steps):
        state, record = rg_step(state, stream, H_s, s_op, cfg, exact_pairing=exact_pairing)
        rho_s[p + 1] = reduced_system_dm(state)
        fluxes.append(record)
        if callback is not None:
            callback(p, state, record)
    raw_trace = np.real(np.trace(rho_s, axis1=1, axis2=2))
    drift = np.max(np.abs(raw_trace - 1))
    if drift > 1e-6:
        log.info("vacuum-part trace drift %.3e", drift)
    obs = {
        name: np.real(np.einsum("tij,ji->t", rho_s, np.asarray(op, dtype=complex))) / raw_trace
        for name, op in observables.items()
    }
    times = cfg.dt * np.arange(n_steps + 1)
    return DensityRgResult(times, rho_s, raw_trace, fluxes, obs, state)
