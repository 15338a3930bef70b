"""Future-coupling matrix K(p), its eigenbasis, and the stream of relevant modes.

K(p)_{r'r} = sum_{p' >= p} conj(M_{p'r'}) M_{p'r} measures how strongly the
past cells r, r' < p will still couple to the system.  The stream keeps m
relevant modes; at every step the incoming cell is mixed into them by a
unitary W_p and the least coupled direction leaves as the outgoing mode.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .kernel import MemoryKernel

STREAM_FORMAT_VERSION = 1
DENSE_LIMIT = 2500


class HorizonError(ValueError):
    """Requested cell lies beyond the precomputed kernel horizon."""


class BranchError(ArithmeticError):
    """Matrix logarithm of W_p is ambiguous (eigenvalue near -1)."""


# --------------------------------------------------------------------------
# K(p) in factored form  K = B^H G B
# --------------------------------------------------------------------------


@dataclass
class FutureCouplingMatrix:
    p: int
    near: np.ndarray  # (n_near_rows, p): M_{p'r} for p <= p' < P_near
    far: np.ndarray | None  # (n_nodes, n_comp, p)
    far_weights: np.ndarray | None  # (n_nodes, n_comp, n_comp)
    junction: tuple[np.ndarray, np.ndarray] | None  # (M, dt M') at P_near - 1/2
    horizon: int  # P_near: first cell summed by quadrature instead of exactly
    x_max: float  # cells beyond x_max are covered by the analytic bound
    tail_bound: float
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.p

    @property
    def matrix(self) -> np.ndarray:
        if self._dense is None:
            k = self.near.conj().T @ self.near
            if self.far is not None:
                tmp = np.einsum("qjk,qkb->qjb", self.far_weights, self.far)
                k += np.einsum("qja,qjb->ab", self.far.conj(), tmp)
            if self.junction is not None:
                v, d = self.junction
                k += (np.outer(d.conj(), v) + np.outer(v.conj(), d)) / 24
            self._dense = 0.5 * (k + k.conj().T)
        return self._dense

    def rows_and_metric(self):
        """Stacked rows B and a function applying the metric G to row-indexed arrays."""
        blocks = [self.near]
        n_near = self.near.shape[0]
        if self.far is not None:
            nq, nc, _ = self.far.shape
            blocks.append(self.far.reshape(nq * nc, self.p))
        if self.junction is not None:
            blocks.append(np.vstack(self.junction))
        rows = np.vstack(blocks)

        def apply_metric(x):
            out = x.copy()
            pos = n_near
            if self.far is not None:
                nq, nc, _ = self.far.shape
                seg = x[pos : pos + nq * nc].reshape(nq, nc, -1)
                out[pos : pos + nq * nc] = np.einsum("qjk,qkb->qjb", self.far_weights, seg).reshape(nq * nc, -1)
                pos += nq * nc
            if self.junction is not None:
                out[pos] = x[pos + 1] / 24
                out[pos + 1] = x[pos] / 24
            return out

        return rows, apply_metric

    def quadratic_form(self, phi: np.ndarray) -> float:
        """(phi|K|phi) without forming K."""
        phi = np.asarray(phi)
        rows, apply_metric = self.rows_and_metric()
        y = rows @ phi
        return float(np.real(np.vdot(y, apply_metric(y[:, None])[:, 0])))


def build_K(
    kernel: MemoryKernel,
    p: int,
    *,
    p_max: int | None = None,
    tol: float = 1e-12,
    dense: bool | None = None,
) -> FutureCouplingMatrix:
    """K(p) over cells 0..p-1.

    ``p_max`` is the largest present cell the kernel horizon was prepared for
    (defaults to p); asking for p beyond it raises ``HorizonError``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    p_end = p if p_max is None else int(p_max)
    if p > p_end:
        raise HorizonError(f"K({p}) needs a kernel horizon prepared for P_max >= {p}, got {p_end}")
    cells = np.arange(p)
    if kernel.is_finite:
        p_near = p_end + kernel.support_cells
        tail = None
    else:
        tail = kernel.tail(p_end, tol)
        p_near = tail.p_near
    lags = kernel.lags(p_near + 1)
    idx = np.arange(p, p_near)[:, None] - cells[None, :]
    near = lags[idx]
    if tail is None:
        out = FutureCouplingMatrix(p, near, None, None, None, p_near, float(p_near), 0.0)
    else:
        far = tail.rows(cells)
        out = FutureCouplingMatrix(
            p, near, far, tail.weights, tail.junction(cells), p_near, tail.x_max, tail.tail_bound
        )
    if dense or (dense is None and p <= DENSE_LIMIT):
        out.matrix  # noqa: B018  (materialize)
    return out


# --------------------------------------------------------------------------
# eigenbasis
# --------------------------------------------------------------------------


def _phase_fix(vecs: np.ndarray, alt: bool = False) -> np.ndarray:
    """Make the largest-magnitude component of each column real positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    piv = vecs[idx, np.arange(vecs.shape[1])]
    ph = np.conj(piv) / np.abs(piv)
    out = vecs * ph[None, :]
    if alt:
        out = out * np.exp(0.5j)
    return out


def _order(vals: np.ndarray, vecs: np.ndarray, rel_tie: float = 1e-12):
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    scale = max(abs(vals[0]), 1e-300) if vals.size else 1.0
    # deterministic ordering inside (near-)degenerate groups
    i = 0
    while i < len(vals):
        j = i + 1
        while j < len(vals) and abs(vals[j] - vals[i]) <= rel_tie * scale:
            j += 1
        if j - i > 1:
            keys = [tuple(np.round(np.concatenate([vecs[:, c].real, vecs[:, c].imag]), 12)) for c in range(i, j)]
            sub = sorted(range(j - i), key=lambda c: keys[c], reverse=True)
            vals[i:j] = vals[i:j][sub]
            vecs[:, i:j] = vecs[:, i:j][:, sub]
        i = j
    return vals, vecs


def fastest_decoupling_basis(K: FutureCouplingMatrix | np.ndarray, n_vectors: int | None = None):
    """Eigenvalues (descending) and phase-fixed orthonormal eigenvectors of K.

    For large K the factored form is used: with B^H = Q R, the non-zero
    spectrum of K = B^H G B is that of the small matrix R G R^H.
    """
    if isinstance(K, np.ndarray):
        mat = 0.5 * (K + K.conj().T)
        vals, vecs = np.linalg.eigh(mat)
        vecs = _phase_fix(vecs)
        return _order(vals, vecs)
    if K._dense is not None or K.p <= DENSE_LIMIT:
        vals, vecs = np.linalg.eigh(K.matrix)
    else:
        rows, apply_metric = K.rows_and_metric()
        q, r = np.linalg.qr(rows.conj().T)
        small = r @ apply_metric(r.conj().T)
        small = 0.5 * (small + small.conj().T)
        vals, u = np.linalg.eigh(small)
        if n_vectors is not None:
            keep = np.argsort(-vals, kind="stable")[:n_vectors]
            vals, u = vals[keep], u[:, keep]
        vecs = q @ u
    vecs = _phase_fix(vecs)
    vals, vecs = _order(vals, vecs)
    if n_vectors is not None:
        vals, vecs = vals[:n_vectors], vecs[:, :n_vectors]
    return vals, vecs


def unitary_log(w: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """h = i ln W on the principal branch; BranchError if an eigenvalue is within tol of -1."""
    t, z = sla.schur(w, output="complex")
    d = np.diag(t)
    if np.any(np.abs(d + 1) < tol):
        raise BranchError("W_p has an eigenvalue within %.0e of -1" % tol)
    theta = np.angle(d)
    h = (z * (-theta)[None, :]) @ z.conj().T
    return 0.5 * (h + h.conj().T)


# --------------------------------------------------------------------------
# stream of relevant modes
# --------------------------------------------------------------------------


@dataclass
class ModeStream:
    """Per-step data of the relevant-mode frame.

    Slots 0..m-1 hold the relevant modes, slot m the incoming / outgoing
    mode.  While p < m the incoming cell p enters slot p and W_p = I.
    """

    m: int
    dt: float
    n_steps: int
    m0: float
    half_value: complex
    lags: np.ndarray  # M(k dt), k = 0..n_steps
    couplings: np.ndarray  # (n_steps, m): M_i(p)
    W: np.ndarray  # (n_steps, m+1, m+1)
    h: np.ndarray  # (n_steps, m+1, m+1)
    eigenvalues: np.ndarray  # (n_steps, m+1): spectrum of the projected K(p+1); NaN while p < m
    discarded: np.ndarray  # (n_steps,): sum_i |M_out,i(p)|^2
    kernel_info: dict = field(default_factory=dict)

    def incoming_slot(self, p: int) -> int:
        return min(p, self.m)

    def n_relevant(self, p: int) -> int:
        return min(p, self.m)

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            format_version=np.int64(STREAM_FORMAT_VERSION),
            m=np.int64(self.m),
            dt=np.float64(self.dt),
            n_steps=np.int64(self.n_steps),
            m0=np.float64(self.m0),
            half_value=np.complex128(self.half_value),
            lags=self.lags,
            couplings=self.couplings,
            W=self.W,
            h=self.h,
            eigenvalues=self.eigenvalues,
            discarded=self.discarded,
            kernel_info=np.array(json.dumps(self.kernel_info, sort_keys=True)),
        )

    @classmethod
    def load(cls, path) -> "ModeStream":
        with np.load(path, allow_pickle=False) as f:
            version = int(f["format_version"])
            if version != STREAM_FORMAT_VERSION:
                raise ValueError(f"stream format version {version} is not supported (expected {STREAM_FORMAT_VERSION})")
            return cls(
                m=int(f["m"]),
                dt=float(f["dt"]),
                n_steps=int(f["n_steps"]),
                m0=float(f["m0"]),
                half_value=complex(f["half_value"]),
                lags=f["lags"],
                couplings=f["couplings"],
                W=f["W"],
                h=f["h"],
                eigenvalues=f["eigenvalues"],
                discarded=f["discarded"],
                kernel_info=json.loads(str(f["kernel_info"])),
            )


def build_stream(kernel: MemoryKernel, m: int, n_steps: int, *, tol: float = 1e-12,
                 horizon_only: bool = False) -> ModeStream:
    """Construct W_p, h(p) and the couplings M_i(p) for p = 0..n_steps-1.

    With ``horizon_only`` (finite kernels) the future couplings that decide
    the modes stop at the last cell of the run instead of the kernel support.
    """
    if m < 0 or n_steps < 1:
        raise ValueError("need m >= 0 and n_steps >= 1")
    dt = kernel.dt
    if kernel.is_finite:
        tail = None
        p_near = n_steps if horizon_only else n_steps + kernel.support_cells + 1
    else:
        tail = kernel.tail(n_steps, tol)
        p_near = tail.p_near
    lags = kernel.lags(p_near + 1)
    n_slots = m + 1
    L = p_near

    # future amplitudes of each slot mode: near cells, far nodes, junction values
    g = np.zeros((n_slots, L), dtype=complex)
    if tail is not None:
        n_q, n_c = len(tail.nodes), tail.n_comp
        gf = np.zeros((n_slots, n_q, n_c), dtype=complex)
        gj = np.zeros((n_slots, 2), dtype=complex)

    couplings = np.zeros((n_steps, m), dtype=complex)
    W_all = np.zeros((n_steps, n_slots, n_slots), dtype=complex)
    h_all = np.zeros((n_steps, n_slots, n_slots), dtype=complex)
    eig_all = np.full((n_steps, n_slots), np.nan)
    discarded = np.zeros(n_steps)
    row_norm = np.concatenate([[0.0], np.cumsum(np.abs(lags[1:]) ** 2)])
    eye = np.eye(n_slots, dtype=complex)

    for p in range(n_steps):
        n_rel = min(p, m)
        couplings[p, :n_rel] = g[:n_rel, p]
        discarded[p] = max(0.0, row_norm[p] - float(np.sum(np.abs(couplings[p, :n_rel]) ** 2)))
        slot = min(p, m)
        # incoming cell p
        g[slot] = 0
        g[slot, p:] = lags[: L - p]
        if tail is not None:
            gf[slot] = tail.rows([p])[:, :, 0]
            v, d = tail.junction([p])
            gj[slot] = (v[0], d[0])
        if p < m:
            W_all[p] = eye
            continue
        # projected K(p+1) in span{relevant, incoming}
        fut = g[:, p + 1 :]
        kt = fut.conj() @ fut.T
        if tail is not None:
            kt += np.einsum("aqj,qjk,bqk->ab", gf.conj(), tail.weights, gf)
            kt += (np.outer(gj[:, 1].conj(), gj[:, 0]) + np.outer(gj[:, 0].conj(), gj[:, 1])) / 24
        kt = 0.5 * (kt + kt.conj().T)
        vals, u = np.linalg.eigh(kt)
        vals, u = _order(vals, _phase_fix(u))
        w = u.T
        try:
            h = unitary_log(w)
        except BranchError:
            u = _phase_fix(u, alt=True)
            w = u.T
            h = unitary_log(w)
        W_all[p], h_all[p], eig_all[p] = w, h, vals
        g = w @ g
        if tail is not None:
            gf = np.einsum("ab,bqj->aqj", w, gf)
            gj = w @ gj

    info = kernel.describe()
    return ModeStream(
        m=m,
        dt=dt,
        n_steps=n_steps,
        m0=kernel.m0,
        half_value=kernel.half_value,
        lags=lags[: n_steps + 1].copy(),
        couplings=couplings,
        W=W_all,
        h=h_all,
        eigenvalues=eig_all,
        discarded=discarded,
        kernel_info=info,
    )


def extend_stream(stream: ModeStream | None, kernel: MemoryKernel, p: int, m: int | None = None) -> ModeStream:
    """Stream valid through step p (rebuilt deterministically from the kernel)."""
    m = stream.m if stream is not None else m
    if m is None:
        raise ValueError("m is required when no stream is given")
    if stream is not None and stream.n_steps > p:
        return stream
    return build_stream(kernel, m, p + 1)


def mode_frames(stream: ModeStream, p: int):
    """Relevant modes at step p and the outgoing mode of step p-1, over cells 0..p-1."""
    if not 0 <= p <= stream.n_steps:
        raise IndexError(f"stream covers p <= {stream.n_steps}, got {p}")
    m = stream.m
    frame = np.zeros((m + 1, max(p, 1)), dtype=complex)
    out = None
    for q in range(p):
        slot = min(q, m)
        frame[slot] = 0
        frame[slot, q] = 1
        if q >= m:
            frame[:, : q + 1] = stream.W[q] @ frame[:, : q + 1]
            out = frame[m, : q + 1].copy()
    return frame[: min(p, m), :p], out


def mode_shape(stream: ModeStream, p: int, k: int) -> np.ndarray:
    """phi_k(p) over cells 0..p-1 (k is 1-based, k <= m)."""
    if not 1 <= k <= stream.m:
        raise IndexError(f"mode index {k} outside 1..{stream.m}")
    rel, _ = mode_frames(stream, p)
    if k > rel.shape[0]:
        raise IndexError(f"only {rel.shape[0]} relevant modes exist at p={p}")
    return rel[k - 1]


def intensity2(kernel: MemoryKernel, phi: np.ndarray, q: int, p_max: int | None = None) -> float:
    """I_2[phi; tau_q]: sqrt of (phi|K(q)|phi) for phi over cells 0..len(phi)-1, q >= len(phi)."""
    n = len(phi)
    if q < n:
        raise ValueError("q must not precede the support of phi")
    padded = np.zeros(q, dtype=complex)
    padded[:n] = phi
    K = build_K(kernel, q, p_max=p_max, dense=False)
    return float(np.sqrt(max(K.quadratic_form(padded), 0.0)))


def tail_spectrum(phi: np.ndarray, dt: float, n_tail: int | None = None):
    """Angular frequencies and power of the DFT of the oldest ``n_tail`` cells of a mode.

    The default tail is the older half of the support.  Modes built from a
    memory function e^{-i eps t} carry e^{-i eps r dt}; the transform
    correlates with that sign, so the band shows up at w = +eps.
    """
    phi = np.asarray(phi, dtype=complex)
    n_tail = len(phi) // 2 if n_tail is None else int(n_tail)
    if not 2 <= n_tail <= len(phi):
        raise ValueError("tail must hold at least two cells and fit inside the mode")
    seg = phi[:n_tail]
    amplitude = np.fft.ifft(seg) * n_tail
    omega = 2 * np.pi * np.fft.fftfreq(n_tail, dt)
    order = np.argsort(omega)
    return omega[order], np.abs(amplitude[order]) ** 2


def spectral_peaks(omega: np.ndarray, power: np.ndarray, n_peaks: int = 2) -> np.ndarray:
    """Frequencies of the ``n_peaks`` largest local maxima, ascending."""
    interior = (power[1:-1] >= power[:-2]) & (power[1:-1] >= power[2:])
    idx = np.flatnonzero(interior) + 1
    top = idx[np.argsort(power[idx])[::-1][:n_peaks]]
    return np.sort(omega[top])
