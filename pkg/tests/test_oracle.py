import numpy as np
import pytest
import scipy.linalg as sl

from rtrg.kernel import PowerExp, Waveguide
from rtrg.oracle import exact_star, exact_waveguide, lindblad, star_grid

SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
EXCITED = np.diag([0.0, 1.0]).astype(complex)


def test_chain_first_site_reproduces_waveguide_memory():
    eps, h, L = 1.0, 0.05, 60
    hop = np.diag(np.full(L, eps)) + h * (np.eye(L, k=1) + np.eye(L, k=-1))
    t = np.linspace(0, 200, 9)
    amp = np.array([sl.expm(-1j * hop * x)[0, 0] for x in t])
    np.testing.assert_allclose(amp, Waveguide(eps, h).memory(t), atol=1e-10)


def test_lindblad_decay_is_second_order():
    up = np.outer([0, 1], [0, 1]).astype(complex)
    errs = []
    for dt in (0.1, 0.05):
        res = lindblad(np.zeros((2, 2)), SIGMA_MINUS, 1.0, dt, 5.0, up)
        errs.append(np.max(np.abs(res.expectation(EXCITED) - np.exp(-res.times))))
    assert errs[1] < 1e-3
    assert errs[0] / errs[1] == pytest.approx(4, abs=0.3)


def test_lindblad_validation_and_trace():
    with pytest.raises(ValueError):
        lindblad(np.zeros((2, 2)), SIGMA_MINUS, -1.0, 0.1, 1.0, [0, 1])
    H = lambda t: 0.3 * np.cos(t) * np.array([[0, 1], [1, 0]])
    res = lindblad(H, SIGMA_MINUS, 0.5, 0.05, 3.0, np.array([0, 1]))
    np.testing.assert_allclose(np.trace(res.rho_s, axis1=1, axis2=2).real, 1.0, atol=1e-12)


def test_uncoupled_system_evolves_unitarily():
    H = np.array([[0, 0.4], [0.4, 1.0]], dtype=complex)
    res = exact_waveguide(H, np.zeros((2, 2)), 1.0, 0.05, 3, 1, 0.01, 2.0)
    psi = sl.expm(-2.0j * H) @ np.array([0, 1])
    np.testing.assert_allclose(res.rho_s[-1], np.outer(psi, psi.conj()), atol=1e-4)


def test_waveguide_chain_length_converged_at_short_times():
    H = np.diag([0.0, 1.0]).astype(complex)
    a = exact_waveguide(H, SIGMA_MINUS, 1.0, 0.05, 4, 2, 0.05, 10.0)
    b = exact_waveguide(H, SIGMA_MINUS, 1.0, 0.05, 6, 2, 0.05, 10.0)
    np.testing.assert_allclose(a.expectation(EXCITED), b.expectation(EXCITED), atol=1e-6)
    np.testing.assert_allclose(np.trace(a.rho_s, axis1=1, axis2=2).real, 1.0, atol=1e-10)


def test_star_grid_couplings_and_decay():
    d = PowerExp(0.2, 1.0, 1.0)
    omega, g = star_grid(d, 10.0, n_omega=40, d_omega=0.25)
    np.testing.assert_allclose(g**2, d.spectral(omega) * 0.25 / np.pi)
    res = exact_star(np.diag([0.0, 1.0]), SIGMA_MINUS, d, 20, 1, 0.05, 5.0, omega_max=10.0)
    pop = res.expectation(EXCITED)
    assert pop[0] == pytest.approx(1.0) and 0 < pop[-1] < 1


def test_oracle_dimension_budget():
    with pytest.raises(MemoryError):
        exact_waveguide(np.zeros((2, 2)), SIGMA_MINUS, 1.0, 0.05, 40, 8, 0.1, 1.0)
