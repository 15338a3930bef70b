"""System presets.

Qubit basis order is (|down>, |up>), so sigma_minus = |down><up| has its
single entry at [0, 1] and sigma_plus sigma_minus = diag(0, 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernel import SpectralDensity, Waveguide, PowerSharp

SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.conj().T
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)
UP = np.array([0, 1], dtype=complex)
DOWN = np.array([1, 0], dtype=complex)

QUBIT_OPERATORS = {
    "sigma_minus": SIGMA_MINUS,
    "sigma_plus": SIGMA_PLUS,
    "sigma_x": SIGMA_X,
    "sigma_y": SIGMA_Y,
    "sigma_z": SIGMA_Z,
    "excited": SIGMA_PLUS @ SIGMA_MINUS,
}


@dataclass
class Model:
    name: str
    H_s: Callable[[float], np.ndarray] | np.ndarray
    s_op: np.ndarray
    psi0: np.ndarray
    density: SpectralDensity | None = None
    observables: dict = field(default_factory=dict)

    @property
    def d_sys(self) -> int:
        return self.s_op.shape[0]

    def hamiltonian(self, t: float) -> np.ndarray:
        return np.asarray(self.H_s(t) if callable(self.H_s) else self.H_s, dtype=complex)


def driven_qubit_waveguide(eps=1.0, h=0.05, drive=0.1, drive_freq=1.0, psi0=UP) -> Model:
    """sigma+ sigma- + drive cos(w t) (sigma+ + sigma-), coupled through sigma- to a waveguide."""
    base = SIGMA_PLUS @ SIGMA_MINUS
    flip = SIGMA_PLUS + SIGMA_MINUS

    def H_s(t):
        return base + drive * np.cos(drive_freq * t) * flip

    return Model(
        "driven_qubit_waveguide",
        H_s,
        SIGMA_MINUS.copy(),
        np.asarray(psi0, dtype=complex),
        Waveguide(eps, h),
        {"excited": base, "sigma_x": SIGMA_X},
    )


def subohmic_nonrwa(alpha=0.1, s=0.5, delta=1.0, omega_c=1.0, drive=0.1, drive_freq=1.0, psi0=UP) -> Model:
    """-(delta/2) sigma_x + drive cos(w t) sigma_z with sigma_z coupling to a sharp-cutoff bath."""

    def H_s(t):
        return -0.5 * delta * SIGMA_X + drive * np.cos(drive_freq * t) * SIGMA_Z

    return Model(
        "subohmic_nonrwa",
        H_s,
        SIGMA_Z.copy(),
        np.asarray(psi0, dtype=complex),
        PowerSharp(alpha, s, omega_c),
        {"half_sigma_x": 0.5 * SIGMA_X, "sigma_z": SIGMA_Z},
    )


def custom(H_s, s_op, psi0, density=None, observables=None) -> Model:
    H_s = np.asarray(H_s, dtype=complex)
    s_op = np.asarray(s_op, dtype=complex)
    if H_s.shape != s_op.shape or H_s.shape[0] != H_s.shape[1]:
        raise ValueError("H_s and s_op must be square and of equal size")
    if not np.allclose(H_s, H_s.conj().T):
        raise ValueError("H_s must be Hermitian")
    obs = observables if observables is not None else ({"excited": QUBIT_OPERATORS["excited"]} if H_s.shape[0] == 2 else {})
    return Model("custom", H_s, s_op, np.asarray(psi0, dtype=complex), density, obs)


PRESETS = {
    "driven_qubit_waveguide": driven_qubit_waveguide,
    "subohmic_nonrwa": subohmic_nonrwa,
}
