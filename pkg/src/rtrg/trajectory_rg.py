"""Stochastic RG along quantum trajectories driven by classical vacuum noise.

Trajectories are propagated in column batches: every column is an
independent relevant wavefunction, the sparse operators are shared, and the
per-trajectory c-number terms enter as column scalings.  Batches have a
fixed size so results do not depend on how batches are spread over threads.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .density_rg import MidpointError, RgConfig
from .fock import FockBasis
from .kernel import MemoryKernel, SpectralDensity
from .krylov import SectorUnitary, apply_bogoliubov
from .modes import ModeStream

log = logging.getLogger(__name__)

DEFAULT_BATCH = 64
DEAD_WEIGHT = 1e-300


class AllTrajectoriesDead(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------
@dataclass
class NoiseSample:
    xi: np.ndarray  # field at the midpoints tau_r
    d_omega: float
    omega_max: float
    seed: int
    index: int = 0


class NoiseGenerator:
    """Linear map from unit complex Gaussians z to the midpoint noise xi.

    ``spectral``: xi_r = sqrt(dw) sum_k c(w_k) exp(-i w_k tau_r) z_k with
    c = sqrt(J / pi) on the grid w_k = (k + 1/2) dw.
    ``covariance``: xi = F z with F F^dag = M_rs, used for tabulated kernels.
    """

    def __init__(self, kernel: MemoryKernel, n_steps: int, *, density: SpectralDensity | None = None,
                 d_omega: float | None = None, omega_max: float | None = None, method: str | None = None,
                 rank_tol: float = 1e-13):
        self.dt = kernel.dt
        self.n_steps = n_steps
        density = density if density is not None else kernel.density
        if method is None:
            method = "covariance" if density is None else "spectral"
        self.method = method
        taus = (np.arange(n_steps) + 0.5) * self.dt
        if method == "spectral":
            if density is None:
                raise ValueError("spectral noise needs a spectral density")
            t_end = n_steps * self.dt
            lo, hi = density.support()
            top = hi if omega_max is None else float(omega_max)
            # resolve both the run length and the structure of J inside its support
            target = min(2 * np.pi / (4 * t_end), (top - lo) / 128) if d_omega is None else float(d_omega)
            n_bins = max(1, int(np.ceil(top / target)))
            # align the grid with the top of the support
            self.d_omega = top / n_bins
            self.omega_max = top
            omega = (np.arange(n_bins) + 0.5) * self.d_omega
            amp = np.sqrt(self.d_omega * density.spectral(omega) / np.pi)
            keep = amp > 0
            self.omega = omega[keep]
            self.factor = amp[keep] * np.exp(-1j * np.outer(taus, self.omega))
            self._check_covariance(kernel)
        elif method == "covariance":
            lags = kernel.lags(n_steps + 1)
            k = np.subtract.outer(np.arange(n_steps), np.arange(n_steps))
            cov = np.where(k < 0, lags[np.abs(k)].conj(), lags[np.abs(k)])
            vals, vecs = np.linalg.eigh(0.5 * (cov + cov.conj().T))
            if vals.min() < -1e-10 * max(vals.max(), 1e-300):
                warnings.warn(f"kernel matrix has negative eigenvalue {vals.min():.3e}; clipped", stacklevel=2)
            keep = vals > rank_tol * max(vals.max(), 1e-300)
            order = np.argsort(vals[keep])[::-1]
            self.factor = (vecs[:, keep] * np.sqrt(vals[keep]))[:, order]
            self.d_omega = float("nan")
            self.omega_max = float("nan")
            self.omega = np.array([])
        else:
            raise ValueError(f"unknown noise method {method!r}")

    @property
    def n_components(self) -> int:
        return self.factor.shape[1]

    def _check_covariance(self, kernel):
        n_check = min(self.n_steps, 400)
        est = (self.factor[:n_check] * self.factor[0].conj()).sum(axis=1)
        err = float(np.max(np.abs(est - kernel.lags(n_check))))
        self.covariance_error = err
        scale = abs(kernel.m0)
        if err > 1e-2 * scale:
            warnings.warn(f"noise grid reproduces the kernel only to {err:.3e} (M(0) = {scale:.3e})", stacklevel=3)

    def unit_gaussians(self, seed, size: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        n = self.n_components
        x = rng.standard_normal(n if size is None else (n, size))
        y = rng.standard_normal(n if size is None else (n, size))
        return (x + 1j * y) / np.sqrt(2)

    def from_gaussians(self, z) -> np.ndarray:
        return self.factor @ z

    def sample(self, seed: int, index: int = 0) -> NoiseSample:
        z = self.unit_gaussians(trajectory_seed(seed, index))
        return NoiseSample(self.from_gaussians(z), self.d_omega, self.omega_max, seed, index)


def trajectory_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Independent stream per (run seed, trajectory index)."""
    return np.random.SeedSequence((int(base_seed), int(index)))


def sample_noise(kernel: MemoryKernel, density, dt: float, steps: int, d_omega=None, omega_max=None,
                 seed: int = 0) -> NoiseSample:
    if abs(kernel.dt - dt) > 1e-12 * dt:
        raise ValueError("dt does not match the kernel")
    gen = NoiseGenerator(kernel, steps, density=density, d_omega=d_omega, omega_max=omega_max)
    return gen.sample(seed)


# --------------------------------------------------------------------------
# propagation
# --------------------------------------------------------------------------
@dataclass
class TrajectoryState:
    """A batch of relevant wavefunctions (columns) with their shift history."""

    basis: FockBasis
    psi: np.ndarray  # (N, B), columns kept at unit norm
    log_norm: np.ndarray  # (B,), log of the dropped normalization
    shift_history: np.ndarray  # (n_steps, B) conditional averages of s at tau_l
    p: int = 0
    f_current: np.ndarray | None = None
    dead: np.ndarray | None = None

    @classmethod
    def initial(cls, basis: FockBasis, psi0, n_batch: int, n_steps: int) -> "TrajectoryState":
        psi0 = np.asarray(psi0, dtype=complex)
        psi = np.zeros((basis.dim, n_batch), dtype=complex)
        psi[: basis.d_sys] = (psi0 / np.linalg.norm(psi0))[:, None]
        return cls(basis, psi, np.zeros(n_batch), np.zeros((n_steps, n_batch), dtype=complex), 0,
                   np.zeros(n_batch, dtype=complex), np.zeros(n_batch, dtype=bool))

    @property
    def vacuum_part(self) -> np.ndarray:
        return self.psi[: self.basis.d_sys]

    def vacuum_weight(self) -> np.ndarray:
        """||<0|Phi>||^2 including the dropped normalization."""
        v = self.vacuum_part
        return np.sum(np.abs(v) ** 2, axis=0) * np.exp(2 * self.log_norm)


def conditional_average(state: TrajectoryState, op_sys) -> np.ndarray:
    """<0|Phi> normalized expectation of a system operator, per column."""
    op_sys = np.asarray(op_sys, dtype=complex)
    v = state.vacuum_part
    den = np.sum(np.abs(v) ** 2, axis=0)
    if np.any(den == 0):
        raise ZeroDivisionError("zero vacuum weight")
    return np.einsum("ib,ij,jb->b", v.conj(), op_sys, v) / den


def _conditional(v, op):
    den = np.sum(np.abs(v) ** 2, axis=0)
    den = np.where(den > 0, den, 1.0)
    return np.einsum("ib,ij,jb->b", v.conj(), op, v) / den


@dataclass
class _StepOperators:
    base: sp.csr_matrix  # H_s + s psi^dag + s^dag A
    s_full: sp.csr_matrix
    absorbed: sp.csr_matrix  # A = M(0) psi_p + sum_i M_i phi_i


def _step_operators(basis: FockBasis, stream: ModeStream, p: int, H_sys, s_op) -> _StepOperators:
    slot = stream.incoming_slot(p)
    s_full = basis.embed(s_op)
    absorbed = stream.m0 * basis.lower(slot)
    for i, c in enumerate(stream.couplings[p, : stream.n_relevant(p)]):
        if c != 0:
            absorbed = absorbed + c * basis.lower(i)
    absorbed = absorbed.tocsr()
    s_dag = basis.embed(np.asarray(s_op).conj().T)
    base = (basis.embed(H_sys) + s_full @ basis.raise_(slot) + s_dag @ absorbed).tocsr()
    return _StepOperators(base, s_full, absorbed)


def trajectory_step(state: TrajectoryState, noise, stream: ModeStream, H_s, s_op, cfg: RgConfig, *,
                    importance: bool = True, ops: _StepOperators | None = None,
                    unitary: SectorUnitary | None = None) -> TrajectoryState:
    """Advance every column by one step; ``noise`` holds xi_p per column or a NoiseSample.

    ``ops`` and ``unitary`` may be prebuilt for step p and shared between batches.
    """
    p = state.p
    basis = state.basis
    d = basis.d_sys
    if isinstance(noise, NoiseSample):
        xi_p = np.full(state.psi.shape[1], noise.xi[p])
    else:
        xi_p = np.asarray(noise, dtype=complex)
        xi_p = xi_p[p] if xi_p.ndim == 2 else np.broadcast_to(xi_p, (state.psi.shape[1],))
    s_op = np.asarray(s_op, dtype=complex)
    if ops is None:
        H_sys = np.asarray(H_s((p + 0.5) * cfg.dt) if callable(H_s) else H_s, dtype=complex)
        ops = _step_operators(basis, stream, p, H_sys, s_op)
    dt = cfg.dt
    psi = state.psi
    hist = state.shift_history

    if importance:
        lags = stream.lags
        # memory part of the shift: -i dt sum_{l<p} M((p-l) dt) sbar(tau_l)
        memory = -1j * dt * (lags[p:0:-1] @ hist[:p]) if p > 0 else np.zeros(psi.shape[1], dtype=complex)
        s_start = _conditional(psi[:d], s_op)
    new = psi.copy()
    residual = np.inf
    sbar = np.zeros(psi.shape[1], dtype=complex)
    f_p = np.zeros(psi.shape[1], dtype=complex)
    for _ in range(cfg.midpoint_max_iters):
        half = 0.5 * (new + psi)
        if importance:
            sbar = 0.5 * (s_start + _conditional(new[:d], s_op))
            f_p = -0.5j * dt * stream.half_value * sbar + memory
            scal = np.conj(xi_p) + np.conj(f_p)
            h_half = ops.base @ half + (ops.s_full @ half) * scal - (ops.absorbed @ half) * np.conj(sbar)
        else:
            h_half = ops.base @ half + (ops.s_full @ half) * np.conj(xi_p)
        nxt = psi - 1j * dt * h_half
        residual = np.max(np.abs(nxt - new))
        new = nxt
        if residual <= cfg.midpoint_tol:
            break
    else:
        raise MidpointError(residual, cfg.midpoint_max_iters)

    if p >= stream.m:
        if cfg.disentangler == "krylov":
            new = apply_bogoliubov(stream.h[p].T, basis, new, cfg.krylov)
        else:
            unitary = unitary if unitary is not None else SectorUnitary(stream.h[p].T, basis)
            new = unitary.apply(new)
        new[~basis.vacuum_mask(stream.m)] = 0
    norms = np.linalg.norm(new, axis=0)
    dead = state.dead.copy() | ~(norms > DEAD_WEIGHT) | ~np.isfinite(norms)
    safe = np.where(dead, 1.0, norms)
    new = new / safe
    new[:, dead] = 0
    log_norm = state.log_norm + np.log(safe)
    log_norm[dead] = -np.inf
    if importance:
        hist[p] = sbar  # history is shared with the previous state
    return TrajectoryState(basis, new, log_norm, hist, p + 1, f_p, dead)


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class TrajectoryConfig:
    n_traj: int = 2000
    seed: int = 0
    d_omega: float | None = None
    omega_max: float | None = None
    importance: bool = True
    batch_size: int = DEFAULT_BATCH
    noise_method: str | None = None

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class BatchRecord:
    """Per-trajectory conditional averages (n_t, B) per observable and log weights (n_t, B)."""

    averages: dict
    log_weight: np.ndarray
    dead: np.ndarray


def propagate_batches(stream: ModeStream, H_s, s_op, psi0, cfg: RgConfig, xis, observables: Mapping,
                      *, importance: bool = True, threads: int = 1) -> list[BatchRecord]:
    """Run several column batches in lockstep from t = 0 to cfg.t_end.

    The step operators and the disentangler are built once per step and
    shared by all batches; each batch (columns of an (n_steps, B) noise
    array) evolves independently, so results do not depend on ``threads``.
    """
    n_steps = cfg.n_steps
    s_op = np.asarray(s_op, dtype=complex)
    basis = FockBasis(s_op.shape[0], cfg.m + 1, cfg.n_max)
    states = [TrajectoryState.initial(basis, psi0, xi.shape[1], n_steps) for xi in xis]
    ops = {k: np.asarray(v, dtype=complex) for k, v in observables.items()}
    averages = [{k: np.zeros((n_steps + 1, xi.shape[1])) for k in ops} for xi in xis]
    log_weight = [np.zeros((n_steps + 1, xi.shape[1])) for xi in xis]

    def record(b, t_index):
        v = states[b].vacuum_part
        w = np.sum(np.abs(v) ** 2, axis=0)
        with np.errstate(divide="ignore"):
            log_weight[b][t_index] = np.log(w) + 2 * states[b].log_norm
        for k, op in ops.items():
            averages[b][k][t_index] = np.real(_conditional(v, op))

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 and len(xis) > 1 else None
    try:
        for b in range(len(xis)):
            record(b, 0)
        for p in range(n_steps):
            H_sys = np.asarray(H_s((p + 0.5) * cfg.dt) if callable(H_s) else H_s, dtype=complex)
            step_ops = _step_operators(basis, stream, p, H_sys, s_op)
            unitary = None
            if p >= stream.m and cfg.disentangler != "krylov":
                unitary = SectorUnitary(stream.h[p].T, basis)

            def advance(b):
                states[b] = trajectory_step(states[b], xis[b], stream, H_s, s_op, cfg, importance=importance,
                                            ops=step_ops, unitary=unitary)
                record(b, p + 1)

            if pool is not None:
                list(pool.map(advance, range(len(xis))))
            else:
                for b in range(len(xis)):
                    advance(b)
    finally:
        if pool is not None:
            pool.shutdown()
    return [BatchRecord(averages[b], log_weight[b], states[b].dead) for b in range(len(xis))]


def propagate_batch(stream: ModeStream, H_s, s_op, psi0, cfg: RgConfig, xi: np.ndarray, observables: Mapping,
                    *, importance: bool = True) -> BatchRecord:
    """Run the columns of xi (n_steps, B) from t = 0 to cfg.t_end."""
    return propagate_batches(stream, H_s, s_op, psi0, cfg, [xi], observables, importance=importance)[0]


def _fsum_rows(x: np.ndarray) -> np.ndarray:
    """Exactly rounded sums along axis 1 (order independent)."""
    return np.array([math.fsum(row) for row in x])


@dataclass
class TrajectoryResult:
    times: np.ndarray
    mean: dict
    stderr: dict
    n_traj: int
    n_dead: int
    mean_weight: np.ndarray
    per_trajectory: dict | None = None


def ensemble_statistics(averages: Mapping[str, np.ndarray], log_weight: np.ndarray, importance: bool):
    """Means and standard errors across trajectories (axis 1)."""
    n = log_weight.shape[1]
    finite = np.isfinite(log_weight)
    weight = np.where(finite, np.exp(np.where(finite, log_weight, 0.0)), 0.0)
    mean, stderr = {}, {}
    for k, vals in averages.items():
        if importance:
            mu = _fsum_rows(vals) / n
            var = _fsum_rows((vals - mu[:, None]) ** 2) / max(n - 1, 1)
            mean[k] = mu
            stderr[k] = np.sqrt(var / n)
        else:
            wsum = _fsum_rows(weight)
            ratio = _fsum_rows(weight * vals) / np.where(wsum > 0, wsum, 1.0)
            wbar = wsum / n
            resid = weight * (vals - ratio[:, None])
            var = _fsum_rows(resid**2) / max(n - 1, 1)
            mean[k] = ratio
            stderr[k] = np.sqrt(var / n) / np.where(wbar > 0, wbar, 1.0)
    return mean, stderr, _fsum_rows(weight) / n


def run_trajectories(stream: ModeStream, H_s, s_op, psi0, cfg: RgConfig, tcfg: TrajectoryConfig,
                     observables: Mapping[str, np.ndarray], *, kernel: MemoryKernel, density=None,
                     threads: int = 1, keep_per_trajectory: bool = False) -> TrajectoryResult:
    n_steps = cfg.n_steps
    if stream.n_steps < n_steps:
        raise ValueError(f"stream covers {stream.n_steps} steps, need {n_steps}")
    gen = NoiseGenerator(kernel, n_steps, density=density, d_omega=tcfg.d_omega, omega_max=tcfg.omega_max,
                         method=tcfg.noise_method)
    xis = []
    for start in range(0, tcfg.n_traj, tcfg.batch_size):
        idx = range(start, min(start + tcfg.batch_size, tcfg.n_traj))
        z = np.stack([gen.unit_gaussians(trajectory_seed(tcfg.seed, i)) for i in idx], axis=1)
        xis.append(gen.from_gaussians(z))
    batches = propagate_batches(stream, H_s, s_op, psi0, cfg, xis, observables, importance=tcfg.importance,
                                threads=threads)

    averages = {k: np.concatenate([b.averages[k] for b in batches], axis=1) for k in observables}
    log_weight = np.concatenate([b.log_weight for b in batches], axis=1)
    dead = np.concatenate([b.dead for b in batches])
    if dead.all():
        raise AllTrajectoriesDead("every trajectory lost its vacuum weight")
    if tcfg.importance and dead.any():
        # a dead trajectory has no conditional average; exclude it
        keep = ~dead
        averages = {k: v[:, keep] for k, v in averages.items()}
        log_weight = log_weight[:, keep]
    mean, stderr, mean_weight = ensemble_statistics(averages, log_weight, tcfg.importance)
    times = cfg.dt * np.arange(n_steps + 1)
    per = {"averages": averages, "log_weight": log_weight} if keep_per_trajectory else None
    return TrajectoryResult(times, mean, stderr, tcfg.n_traj, int(dead.sum()), mean_weight, per)


def gauss_hermite_average(stream: ModeStream, H_s, s_op, psi0, cfg: RgConfig, factor: np.ndarray, order: int,
                          *, importance: bool = False) -> np.ndarray:
    """Noise average by tensor Gauss-Hermite quadrature over the columns of ``factor``.

    Returns the averaged unnormalized vacuum block <0|Phi><Phi|0> per time
    (importance off) or the average of the normalized conditional state
    (importance on), shape (n_t, d, d).
    """
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / np.sqrt(2 * np.pi)
    r = factor.shape[1]
    grid = list(product(range(order), repeat=2 * r))
    xr = np.array([[nodes[g[2 * j]] for j in range(r)] for g in grid])
    yr = np.array([[nodes[g[2 * j + 1]] for j in range(r)] for g in grid])
    w = np.array([np.prod([weights[i] for i in g]) for g in grid])
    z = ((xr + 1j * yr) / np.sqrt(2)).T  # (r, n_points)
    xi = factor @ z
    s_op = np.asarray(s_op, dtype=complex)
    d = s_op.shape[0]
    n_steps = cfg.n_steps
    basis = FockBasis(d, cfg.m + 1, cfg.n_max)
    state = TrajectoryState.initial(basis, psi0, xi.shape[1], n_steps)
    out = np.zeros((n_steps + 1, d, d), dtype=complex)

    def accumulate(t_index):
        v = state.vacuum_part
        if importance:
            den = np.sum(np.abs(v) ** 2, axis=0)
            blocks = np.einsum("ib,jb->bij", v, v.conj()) / den[:, None, None]
        else:
            blocks = np.einsum("ib,jb->bij", v, v.conj()) * np.exp(2 * state.log_norm)[:, None, None]
        out[t_index] = np.einsum("b,bij->ij", w, blocks)

    accumulate(0)
    for p in range(n_steps):
        state = trajectory_step(state, xi, stream, H_s, s_op, cfg, importance=importance)
        accumulate(p + 1)
    return out
