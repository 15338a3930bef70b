"""Spectral densities, memory functions and the discretized kernel M_{lr}.

The memory function is M(t) = (1/pi) * int J(w) exp(-i w t) dw.  Three
analytic densities are supported plus a tabulated (synthetic) kernel that is
specified directly by its lags M(k dt).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import mpmath
import numpy as np
from scipy import special

# Kummer series is used for |w_c t| below this, the large-argument split above.
SERIES_SWITCH = 30.0


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("memory function requires finite times")
    return t


def _hermitian_extend(fn, t):
    """Evaluate fn on |t| and conjugate where t < 0 (M(-t) = M(t)*)."""
    t = _check_t(t)
    scalar = t.ndim == 0
    ta = np.atleast_1d(t)
    out = fn(np.abs(ta))
    neg = ta < 0
    out[neg] = np.conj(out[neg])
    return out[0] if scalar else out


@lru_cache(maxsize=None)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=None)
def _gauss_jacobi(n: int, s: float):
    # weight (1+x)^s on [-1, 1]
    return special.roots_jacobi(n, 0.0, s)


def _panel_rule(a, b, n_panels, order, singular_power=None):
    """Composite Gauss-Legendre nodes/weights on [a, b].

    With ``singular_power`` the first panel absorbs (x-a)^s through a
    Gauss-Jacobi rule and the returned weights exclude that factor on the
    first panel; ``factor`` tells which nodes still need it.
    """
    edges = np.linspace(a, b, n_panels + 1)
    xg, wg = _gauss_legendre(order)
    nodes, weights, factor = [], [], []
    for k in range(n_panels):
        lo, hi = edges[k], edges[k + 1]
        half = 0.5 * (hi - lo)
        if k == 0 and singular_power is not None and singular_power > 0:
            xj, wj = _gauss_jacobi(order, float(singular_power))
            nodes.append(lo + half * (xj + 1.0))
            weights.append(wj * half ** (1.0 + singular_power))
            factor.append(np.zeros(order, dtype=bool))
        else:
            nodes.append(lo + half * (xg + 1.0))
            weights.append(wg * half)
            factor.append(np.ones(order, dtype=bool))
    return np.concatenate(nodes), np.concatenate(weights), np.concatenate(factor)


# --------------------------------------------------------------------------
# spectral densities
# --------------------------------------------------------------------------


class SpectralDensity:
    """Base class; subclasses are frozen dataclasses."""

    name = "abstract"

    def spectral(self, omega):
        raise NotImplementedError

    def memory(self, t):
        raise NotImplementedError

    def memory_derivative(self, t):
        raise NotImplementedError

    def components(self) -> list[tuple[float, Callable]]:
        """Split M(t) = sum_j exp(-i nu_j t) a_j(t) into slowly varying a_j.

        Valid for t >= far_time(); used by the far-field quadrature.
        """
        raise NotImplementedError

    def envelope(self) -> list[tuple[float, float]]:
        """Bounds |a_j(t)| <= C_j t^{-kappa_j} for t >= far_time()."""
        raise NotImplementedError

    def far_time(self) -> float:
        return 10.0 * self.time_scale()

    def time_scale(self) -> float:
        raise NotImplementedError

    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    def tail_exponent(self) -> float:
        return min(k for _, k in self.envelope())

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PowerExp(SpectralDensity):
    """J(w) = (alpha w_c / 2) (w/w_c)^s exp(-w/w_c)."""

    alpha: float
    s: float
    omega_c: float
    name = "power_exp"

    def __post_init__(self):
        if not (self.alpha > 0 and self.omega_c > 0 and self.s >= 0):
            raise ValueError("PowerExp needs alpha > 0, omega_c > 0, s >= 0")

    @property
    def prefactor(self):
        return self.alpha * self.omega_c**2 * math.gamma(self.s + 1) / (2 * math.pi)

    def spectral(self, omega):
        w = np.asarray(omega, dtype=float)
        x = np.clip(w, 0, None) / self.omega_c
        out = 0.5 * self.alpha * self.omega_c * x**self.s * np.exp(-x)
        return np.where(w >= 0, out, 0.0)

    def memory(self, t):
        t = _check_t(t)
        return self.prefactor * (1 + 1j * t * self.omega_c) ** (-(self.s + 1))

    def memory_derivative(self, t):
        t = _check_t(t)
        z = 1 + 1j * t * self.omega_c
        return -1j * (self.s + 1) * self.omega_c * self.prefactor * z ** (-(self.s + 2))

    def components(self):
        return [(0.0, self.memory)]

    def envelope(self):
        k = self.s + 1
        return [(self.prefactor * self.omega_c ** (-k), k)]

    def time_scale(self):
        return 1.0 / self.omega_c

    def support(self):
        return (0.0, self.omega_c * (60.0 + 4.0 * self.s))


@dataclass(frozen=True)
class Waveguide(SpectralDensity):
    """Semicircular band of a tight-binding chain, normalized to M(0) = 1."""

    eps: float
    h: float
    name = "waveguide"

    def __post_init__(self):
        if not (self.eps > 0 and self.h > 0):
            raise ValueError("Waveguide needs eps > 0 and h > 0")
        if self.eps < 2 * self.h:
            raise ValueError("Waveguide band [eps-2h, eps+2h] must lie at w >= 0")

    def spectral(self, omega):
        u = np.asarray(omega, dtype=float) - self.eps
        inside = np.abs(u) < 2 * self.h
        val = np.sqrt(np.clip(4 * self.h**2 - u**2, 0, None)) / (2 * self.h**2)
        return np.where(inside, val, 0.0)

    def memory(self, t):
        t = _check_t(t)
        x = 2 * self.h * t
        small = np.abs(x) < 1e-8
        xs = np.where(small, 1.0, x)
        ratio = np.where(small, 1.0 - x**2 / 8, 2 * special.j1(xs) / xs)
        return np.exp(-1j * self.eps * t) * ratio

    def memory_derivative(self, t):
        t = _check_t(t)
        x = 2 * self.h * t
        small = np.abs(x) < 1e-8
        xs = np.where(small, 1.0, x)
        j2_over_x = np.where(small, x / 8, special.jv(2, xs) / xs)
        return -1j * self.eps * self.memory(t) - np.exp(-1j * self.eps * t) * 4 * self.h * j2_over_x

    def components(self):
        h = self.h

        def lower(t):
            x = 2 * h * np.asarray(t, dtype=float)
            return special.hankel1e(1, x) / x

        def upper(t):
            x = 2 * h * np.asarray(t, dtype=float)
            return special.hankel2e(1, x) / x

        return [(self.eps - 2 * h, lower), (self.eps + 2 * h, upper)]

    def envelope(self):
        # x (J1^2 + Y1^2) decreases in x, so |H1(x)|/x <= sqrt(c0) x^{-3/2}
        x0 = 2 * self.h * self.far_time()
        c0 = x0 * (special.j1(x0) ** 2 + special.y1(x0) ** 2)
        pref = math.sqrt(c0) * (2 * self.h) ** -1.5
        return [(pref, 1.5), (pref, 1.5)]

    def time_scale(self):
        return 1.0 / (2 * self.h)

    def support(self):
        return (self.eps - 2 * self.h, self.eps + 2 * self.h)


def _edge_series(s, y):
    """S(y) = sum_k s(s-1)...(s-k+1) (i y)^{-k}, optimally truncated."""
    y = np.asarray(y, dtype=float)
    total = np.ones_like(y, dtype=complex)
    term = np.ones_like(y, dtype=complex)
    prev = np.full(y.shape, np.inf)
    active = np.ones(y.shape, dtype=bool)
    for k in range(1, 200):
        term = term * (s - k + 1) / (1j * y)
        mag = np.abs(term)
        active &= (mag < prev) & (mag > 1e-18 * np.abs(total))
        if not active.any():
            break
        total = np.where(active, total + term, total)
        prev = np.where(active, mag, prev)
    return total


@dataclass(frozen=True)
class PowerSharp(SpectralDensity):
    """J(w) = 2 pi alpha w_c^{1-s} w^s on [0, w_c], zero elsewhere."""

    alpha: float
    s: float
    omega_c: float
    name = "power_sharp"

    def __post_init__(self):
        if not (self.alpha > 0 and self.omega_c > 0 and self.s >= 0):
            raise ValueError("PowerSharp needs alpha > 0, omega_c > 0, s >= 0")

    def spectral(self, omega):
        w = np.asarray(omega, dtype=float)
        inside = (w >= 0) & (w <= self.omega_c)
        val = 2 * math.pi * self.alpha * self.omega_c ** (1 - self.s) * np.clip(w, 0, None) ** self.s
        return np.where(inside, val, 0.0)

    def _power_part(self, t, s):
        return 2 * self.alpha * self.omega_c ** (1 - s) * math.gamma(s + 1) * (1j * t) ** (-(s + 1))

    def _edge_part(self, t, s):
        y = self.omega_c * t
        return -2 * self.alpha * self.omega_c * _edge_series(s, y) / (1j * t)

    def _eval(self, t, s):
        t = np.asarray(t, dtype=float)  # t >= 0 here
        y = self.omega_c * t
        out = np.empty(t.shape, dtype=complex)
        near = y <= SERIES_SWITCH
        if near.any():
            pref = 2 * self.alpha * self.omega_c**2 / (s + 1)
            with mpmath.workdps(30):
                vals = [
                    complex(mpmath.exp(-1j * yy) * mpmath.hyp1f1(1, s + 2, 1j * yy))
                    for yy in y[near]
                ]
            out[near] = pref * np.asarray(vals, dtype=complex)
        far = ~near
        if far.any():
            tf = t[far]
            out[far] = self._power_part(tf, s) + np.exp(-1j * self.omega_c * tf) * self._edge_part(tf, s)
        return out

    def memory(self, t):
        return _hermitian_extend(lambda ta: self._eval(ta, self.s), t)

    def memory_derivative(self, t):
        # d/dt of the s-kernel is -i w_c times the (s+1)-kernel
        t = _check_t(t)
        scalar = t.ndim == 0
        ta = np.atleast_1d(t)
        val = -1j * self.omega_c * self._eval(np.abs(ta), self.s + 1)
        neg = ta < 0
        val[neg] = np.conj(val[neg])
        return val[0] if scalar else val

    def components(self):
        s = self.s
        return [
            (0.0, lambda t: self._power_part(np.asarray(t, dtype=float), s)),
            (self.omega_c, lambda t: self._edge_part(np.asarray(t, dtype=float), s)),
        ]

    def envelope(self):
        t0 = self.far_time()
        c_pow = 2 * self.alpha * self.omega_c ** (1 - self.s) * math.gamma(self.s + 1)
        grid = t0 * np.geomspace(1, 1e3, 64)
        edge_max = float(np.max(np.abs(_edge_series(self.s, self.omega_c * grid))))
        c_edge = 2 * self.alpha * self.omega_c * edge_max * 1.01
        return [(c_pow, self.s + 1), (c_edge, 1.0)]

    def far_time(self):
        return 40.0 / self.omega_c

    def time_scale(self):
        return 1.0 / self.omega_c

    def support(self):
        return (0.0, self.omega_c)


DENSITIES = {cls.name: cls for cls in (PowerExp, Waveguide, PowerSharp)}


def make_density(name: str, **params) -> SpectralDensity:
    try:
        cls = DENSITIES[name]
    except KeyError:
        raise ValueError(f"unknown spectral density {name!r}; choose from {sorted(DENSITIES)}") from None
    return cls(**params)


# --------------------------------------------------------------------------
# quadrature oracle
# --------------------------------------------------------------------------


def _quadrature(density: SpectralDensity, t: float, n_points: int) -> complex:
    order = 16
    n_panels = max(1, n_points // order)
    if isinstance(density, Waveguide):
        theta, w, _ = _panel_rule(-math.pi / 2, math.pi / 2, n_panels, order)
        phase = density.eps + 2 * density.h * np.sin(theta)
        return complex(np.sum(w * 2 * np.cos(theta) ** 2 * np.exp(-1j * phase * t)) / math.pi)
    lo, hi = density.support()
    s = density.s
    x, w, needs = _panel_rule(lo, hi, n_panels, order, singular_power=s)
    jv = density.spectral(x)
    # first panel carries w^s in its weights, so only J(w)/w^s is sampled there
    jv[~needs] = _spectral_over_power(density, x[~needs])
    return complex(np.sum(w * jv * np.exp(-1j * x * t)) / math.pi)


def _spectral_over_power(density, x):
    if isinstance(density, PowerExp):
        return 0.5 * density.alpha * density.omega_c ** (1 - density.s) * np.exp(-x / density.omega_c)
    if isinstance(density, PowerSharp):
        return np.full(x.shape, 2 * math.pi * density.alpha * density.omega_c ** (1 - density.s))
    raise TypeError(type(density))


def quadrature_memory(density: SpectralDensity, t: float, n_points: int = 10_000) -> complex:
    """Direct Fourier quadrature of J; independent check of the closed forms."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    t = float(t)
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    full = _quadrature(density, t, n_points)
    coarse = _quadrature(density, t, max(2, n_points // 2))
    err = abs(full - coarse)
    if err > 1e-8:
        warnings.warn(f"quadrature error estimate {err:.2e} exceeds 1e-8 at t={t}", RuntimeWarning, stacklevel=2)
    return full


# --------------------------------------------------------------------------
# discretized kernel
# --------------------------------------------------------------------------


class MemoryKernel:
    """Memory function sampled on the cell grid t = k dt, with a lag cache.

    Either wraps a ``SpectralDensity`` or holds a finite list of synthetic lags
    (``MemoryKernel.tabulated``), with M(k dt) = 0 beyond the list.
    """

    def __init__(self, density: SpectralDensity | None, dt: float, *, lags=None, half_value=None):
        if not (dt > 0 and math.isfinite(dt)):
            raise ValueError("dt must be positive and finite")
        self.density = density
        self.dt = float(dt)
        self._finite = None
        if density is None:
            lags = np.asarray(lags, dtype=complex)
            if lags.ndim != 1 or lags.size == 0:
                raise ValueError("tabulated kernel needs a non-empty 1d list of lags")
            if abs(lags[0].imag) > 1e-14 or lags[0].real <= 0:
                raise ValueError("M(0) must be real and positive")
            lags = lags.copy()
            lags[0] = lags[0].real
            self._finite = lags
            self._cache = lags
            self._half = complex(lags[0] if half_value is None else half_value)
        else:
            self._cache = np.empty(0, dtype=complex)
            self._half = complex(density.memory(0.5 * self.dt))
        self._tails: dict = {}

    @classmethod
    def tabulated(cls, lags: Sequence[complex], dt: float, half_value=None) -> "MemoryKernel":
        return cls(None, dt, lags=lags, half_value=half_value)

    @classmethod
    def markov(cls, gamma: float, dt: float) -> "MemoryKernel":
        """Flat broadband kernel M_rs = gamma delta_rs / dt (non-physical, Markov tests only)."""
        return cls.tabulated([gamma / dt], dt)

    # -- values ----------------------------------------------------------
    @property
    def is_finite(self) -> bool:
        return self._finite is not None

    @property
    def support_cells(self) -> int | None:
        return None if self._finite is None else len(self._finite)

    @property
    def m0(self) -> float:
        return float(self.lags(1)[0].real)

    @property
    def half_value(self) -> complex:
        """M(dt/2), used by the midpoint noise shift."""
        return self._half

    def value(self, t):
        """M(t) for arbitrary times (analytic kernels only)."""
        if self.density is None:
            raise TypeError("tabulated kernels are only defined on the cell grid")
        return self.density.memory(t)

    def lags(self, n: int) -> np.ndarray:
        """M(k dt) for k = 0..n-1."""
        n = int(n)
        if self._finite is not None:
            out = np.zeros(n, dtype=complex)
            k = min(n, len(self._finite))
            out[:k] = self._finite[:k]
            return out
        if n > len(self._cache):
            size = max(n, 2 * len(self._cache), 64)
            k = np.arange(len(self._cache), size)
            vals = self.density.memory(k * self.dt)
            if len(self._cache) == 0:
                vals[0] = vals[0].real
            self._cache = np.concatenate([self._cache, vals])
        return self._cache[:n]

    def lag(self, k):
        """M(k dt) for integer k of any sign."""
        k = np.asarray(k, dtype=np.int64)
        kmax = int(np.abs(k).max()) + 1 if k.size else 1
        table = self.lags(kmax)
        out = table[np.abs(k)]
        return np.where(k < 0, np.conj(out), out)

    def tail(self, p_end: int, tol: float = 1e-12):
        """Far-field representation covering present cells up to ``p_end``."""
        if self._finite is not None:
            return None
        key = (int(p_end), float(tol))
        if key not in self._tails:
            self._tails[key] = TailQuadrature(self, int(p_end), tol)
        return self._tails[key]

    def describe(self) -> dict:
        if self.density is None:
            return {"name": "tabulated", "lags": [[z.real, z.imag] for z in self._finite], "dt": self.dt}
        return {"name": self.density.name, **self.density.params(), "dt": self.dt}


def eval_memory(kernel: MemoryKernel | SpectralDensity, t):
    """Closed-form M(t)."""
    if isinstance(kernel, MemoryKernel):
        if kernel.density is None:
            k = np.asarray(t, dtype=float) / kernel.dt
            if not np.allclose(k, np.round(k)):
                raise ValueError("tabulated kernels are defined only at multiples of dt")
            return kernel.lag(np.round(k).astype(np.int64))
        return kernel.value(t)
    return kernel.memory(t)


def kernel_matrix_row(kernel: MemoryKernel, l: int, r_range) -> np.ndarray:
    """M_{lr} = M((l-r) dt) for r in ``r_range``."""
    r = np.asarray(list(r_range) if isinstance(r_range, range) else r_range, dtype=np.int64)
    if l < 0 or np.any(r < 0) or np.any(r > l):
        raise IndexError(f"need 0 <= r <= l, got l={l}, r in [{r.min() if r.size else 0}, {r.max() if r.size else 0}]")
    return kernel.lag(l - r)


# --------------------------------------------------------------------------
# far-field quadrature of sum_{p' >= P} conj(M(p'-r')) M(p'-r)
# --------------------------------------------------------------------------

FAR_ORDER = 20


def _lagrange_moments(theta: float) -> np.ndarray:
    """int_{-1}^{1} L_q(u) exp(i theta u) du for the Gauss-Legendre Lagrange basis."""
    return _lagrange_moments_cached(round(float(theta), 12))


@lru_cache(maxsize=4096)
def _lagrange_moments_cached(theta: float) -> np.ndarray:
    nodes, wts = _gauss_legendre(FAR_ORDER)
    if abs(theta) < 1e-14:
        return wts.astype(complex)
    # composite rule, ~8 radians of oscillation per 32-point sub-panel
    n_sub = int(abs(theta) / 8) + 2
    xs, ws = _gauss_legendre(32)
    edges = np.linspace(-1.0, 1.0, n_sub + 1)
    half = 0.5 * np.diff(edges)
    u = (edges[:-1, None] + half[:, None] * (xs[None, :] + 1)).ravel()
    wu = (half[:, None] * ws[None, :]).ravel()
    # Lagrange basis via discrete Legendre orthogonality: L_q(u) = w_q sum_j (2j+1)/2 P_j(u_q) P_j(u)
    pj_nodes = np.polynomial.legendre.legvander(nodes, FAR_ORDER - 1)  # (q, j)
    pj_fine = np.polynomial.legendre.legvander(u, FAR_ORDER - 1)  # (f, j)
    scale = (2 * np.arange(FAR_ORDER) + 1) / 2.0
    basis = (pj_fine * scale) @ (pj_nodes.T * wts)  # (f, q)
    return (wu * np.exp(1j * theta * u)) @ basis


class TailQuadrature:
    """Represents sum_{p' >= P_near} conj(M_{p'r'}) M_{p'r} for all r, r' <= p_end.

    Cells p' < P_near = p_end + n_near are summed exactly.  Beyond, the sum
    becomes an integral (midpoint Euler-Maclaurin, first correction kept) over
    geometric Gauss-Legendre panels.  Each kernel component a_j is slowly
    varying, so the oscillating cross terms between components are integrated
    with Filon-type weights.  Beyond the last panel an analytic envelope bound
    certifies the truncation.
    """

    def __init__(self, kernel: MemoryKernel, p_end: int, tol: float = 1e-12):
        dens = kernel.density
        dt = kernel.dt
        self.p_end = int(p_end)
        self.dt = dt
        comps = dens.components()
        self.nu = np.array([c[0] for c in comps])
        self._amps = [c[1] for c in comps]
        self.n_comp = len(comps)
        env = dens.envelope()

        def em_remainder(n_cells):
            # next Euler-Maclaurin term, 7/5760 f^(3), with f^(3) ~ (freq + 2 kappa / lag)^3 f
            lag = (n_cells - 0.5) * dt
            tot = 0.0
            for i, (ci, ki) in enumerate(env):
                for j, (cj, kj) in enumerate(env):
                    rate = abs(self.nu[i] - self.nu[j]) * dt + (ki + kj) / (n_cells - 0.5)
                    tot += 7 / 5760 * rate**3 * ci * cj * lag ** (-ki - kj)
            return tot

        # scale of K entries: sum_{k>=1} |M(k dt)|^2 (first cells dominate)
        n_near = int(max(64, math.ceil(dens.far_time() / dt)))
        lag_vals = kernel.lags(n_near + 1)
        self.k_scale = float(np.sum(np.abs(lag_vals[1:]) ** 2))
        target = tol * self.k_scale
        while em_remainder(n_near) > 0.1 * target:
            n_near *= 2
        self.n_near = n_near
        self.p_near = self.p_end + self.n_near
        self.x_b = self.p_near - 0.5
        self.em_remainder = em_remainder(n_near)

        def env_bound(x_cells):
            # integral over x > X of (sum_i C_i t^{-k_i})^2, t = (X - p_end) dt
            lag = (x_cells - self.p_end) * dt
            tot = 0.0
            for ci, ki in env:
                for cj, kj in env:
                    e = ki + kj
                    tot += ci * cj * lag ** (1 - e) / (e - 1) / dt
            return tot

        def cross_bound(x_cells):
            if self.n_comp < 2:
                return 0.0
            lag = (x_cells - self.p_end) * dt
            tot = 0.0
            for i in range(self.n_comp):
                for j in range(self.n_comp):
                    if i == j:
                        continue
                    om = abs(self.nu[i] - self.nu[j]) * dt
                    ci, ki = env[i]
                    cj, kj = env[j]
                    tot += 3 * ci * cj * lag ** (-ki - kj) / om
            return tot

        # geometric panels until the envelope bound is below target
        edges = [self.x_b]
        width = float(self.n_near)
        while env_bound(edges[-1]) > 0.5 * target:
            edges.append(edges[-1] + width)
            width *= 2
            if len(edges) > 400:
                raise RuntimeError("tail quadrature failed to reach the requested tolerance")
        self.x_max = edges[-1]
        # cross terms are dropped on panels that start beyond x_osc
        self.x_osc = self.x_b
        for e in edges:
            self.x_osc = e
            if cross_bound(e) <= 0.25 * target:
                break
        self.tail_bound = env_bound(self.x_max) + cross_bound(self.x_osc)

        u, w = _gauss_legendre(FAR_ORDER)
        nodes, weights = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            c, hw = 0.5 * (a + b), 0.5 * (b - a)
            x = c + hw * u
            omega = np.zeros((FAR_ORDER, self.n_comp, self.n_comp), dtype=complex)
            for i in range(self.n_comp):
                omega[:, i, i] = hw * w
                if a >= self.x_osc:
                    continue
                for j in range(i + 1, self.n_comp):
                    freq = (self.nu[i] - self.nu[j]) * dt
                    phase = np.exp(1j * math.fmod(freq * c, 2 * math.pi))
                    wq = hw * phase * _lagrange_moments(freq * hw)
                    omega[:, i, j] = wq
                    omega[:, j, i] = np.conj(wq)
            nodes.append(x)
            weights.append(omega)
        self.nodes = np.concatenate(nodes)
        self.weights = np.concatenate(weights)

        self.tail_bound += self.em_remainder
        self._kernel = kernel

    def rows(self, cells) -> np.ndarray:
        """rho_j(x_q, r) = a_j((x_q - r) dt) exp(i nu_j r dt); shape (n_nodes, n_comp, len(cells))."""
        r = np.asarray(cells, dtype=float)
        lag = (self.nodes[:, None] - r[None, :]) * self.dt
        out = np.empty((len(self.nodes), self.n_comp, len(r)), dtype=complex)
        for j, amp in enumerate(self._amps):
            out[:, j, :] = amp(lag) * np.exp(1j * np.fmod(self.nu[j] * r * self.dt, 2 * math.pi))[None, :]
        return out

    def junction(self, cells):
        """(M, dt M') at x = P_near - 1/2 for each cell r."""
        r = np.asarray(cells, dtype=float)
        t = (self.x_b - r) * self.dt
        dens = self._kernel.density
        return dens.memory(t), self.dt * dens.memory_derivative(t)

    def gram(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """sum_q left_q^H Omega_q right_q for amplitude arrays (n_nodes, n_comp, a/b)."""
        tmp = np.einsum("qjk,qkb->qjb", self.weights, right)
        return np.einsum("qja,qjb->ab", np.conj(left), tmp)
