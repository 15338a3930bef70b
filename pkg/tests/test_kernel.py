import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtrg.kernel import (
    MemoryKernel,
    PowerExp,
    PowerSharp,
    Waveguide,
    eval_memory,
    kernel_matrix_row,
    make_density,
    quadrature_memory,
)


def mp_memory(density, t):
    """(1/pi) int J(w) e^{-iwt} dw by mpmath adaptive quadrature."""
    lo, hi = density.support()
    if isinstance(density, PowerExp):
        hi = mpmath.inf
    f = lambda w: density.spectral(float(w)) * mpmath.exp(-1j * w * t) / mpmath.pi
    if isinstance(density, Waveguide):
        pts = np.linspace(lo, hi, 9)
    else:
        pts = [lo, hi] if hi != mpmath.inf else [0, 1, 10, 50, mpmath.inf]
    with mpmath.workdps(20):
        return complex(mpmath.quad(f, list(pts), maxdegree=10))


def test_power_exp_at_zero():
    assert PowerExp(1.0, 1.0, 1.0).memory(0.0) == pytest.approx(1 / (2 * math.pi), rel=1e-14)


def test_waveguide_at_zero():
    assert Waveguide(1.0, 0.05).memory(0.0) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize(
    "density",
    [PowerExp(0.3, 0.5, 1.0), PowerExp(1.0, 2.0, 2.0), PowerSharp(0.1, 0.5, 1.0), PowerSharp(0.2, 1.0, 2.0)],
    ids=lambda d: f"{d.name}-s{d.s}",
)
@pytest.mark.parametrize("t", [0.0, 0.7, 3.0, 25.0])
def test_closed_form_matches_mpmath(density, t):
    ref = mp_memory(density, t)
    assert abs(density.memory(t) - ref) <= 1e-9 * max(1.0, abs(ref))


@pytest.mark.parametrize("t", [0.0, 5.0, 40.0, 150.0])
def test_waveguide_matches_mpmath(t):
    d = Waveguide(1.0, 0.05)
    theta_int = mpmath.quad(lambda th: 2 * mpmath.cos(th) ** 2 * mpmath.exp(-1j * (1 + 0.1 * mpmath.sin(th)) * t),
                            [-mpmath.pi / 2, 0, mpmath.pi / 2]) / mpmath.pi
    assert abs(d.memory(t) - complex(theta_int)) < 1e-12


def test_power_sharp_switch_is_continuous():
    d = PowerSharp(0.1, 0.5, 1.0)
    below, above = d.memory(30.0 - 1e-9), d.memory(30.0 + 1e-9)
    assert abs(below - above) < 1e-9


@pytest.mark.parametrize("density", [PowerExp(0.5, 1.0, 1.0), Waveguide(1.0, 0.05), PowerSharp(0.1, 0.5, 1.0)],
                         ids=lambda d: d.name)
def test_quadrature_oracle_agrees(density):
    for t in [0.0, 1.3, 12.0]:
        assert abs(quadrature_memory(density, t) - density.memory(t)) < 1e-8


@settings(max_examples=40, deadline=None)
@given(t=st.floats(min_value=0.0, max_value=500.0), s=st.floats(min_value=0.0, max_value=3.0))
def test_memory_is_hermitian(t, s):
    for d in (PowerExp(0.5, s, 1.0), Waveguide(1.0, 0.05)):
        assert d.memory(-t) == pytest.approx(np.conj(d.memory(t)), abs=1e-14)


@pytest.mark.parametrize("density", [PowerExp(1.0, 0.5, 1.0), Waveguide(2.0, 0.3), PowerSharp(0.1, 0.5, 1.0)],
                         ids=lambda d: d.name)
def test_m0_real_positive(density):
    m0 = density.memory(0.0)
    assert abs(np.imag(m0)) < 1e-14 and np.real(m0) > 0


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_power_exp_tail_exponent(s):
    d = PowerExp(1.0, s, 1.0)
    t = np.array([1e3, 1e4])
    slope = np.diff(np.log(np.abs(d.memory(t)))) / np.diff(np.log(t))
    assert slope[0] == pytest.approx(-(s + 1), abs=1e-3)


def test_waveguide_tail_exponent():
    d = Waveguide(1.0, 0.05)
    t = np.linspace(2000, 4000, 4001)
    env = np.abs(d.memory(t))
    # envelope of |J1(x)/x| goes like x^{-3/2}; compare local maxima
    peaks = [env[i] for i in range(1, len(env) - 1) if env[i] >= env[i - 1] and env[i] >= env[i + 1]]
    tp = [t[i] for i in range(1, len(env) - 1) if env[i] >= env[i - 1] and env[i] >= env[i + 1]]
    slope = np.polyfit(np.log(tp), np.log(peaks), 1)[0]
    assert slope == pytest.approx(-1.5, abs=0.05)


def test_power_sharp_tail_is_one_over_t():
    # the cutoff edge at w_c dominates the far tail
    d = PowerSharp(0.1, 0.5, 1.0)
    t = np.array([2e3, 2e4])
    slope = np.diff(np.log(np.abs(d.memory(t)))) / np.diff(np.log(t))
    assert slope[0] == pytest.approx(-1.0, abs=0.05)


def test_non_finite_time_rejected():
    with pytest.raises(ValueError):
        PowerExp(1.0, 1.0, 1.0).memory(np.inf)


@pytest.mark.parametrize("bad", [dict(alpha=-1, s=1, omega_c=1), dict(alpha=1, s=-0.1, omega_c=1),
                                 dict(alpha=1, s=1, omega_c=0)])
def test_invalid_parameters(bad):
    with pytest.raises(ValueError):
        PowerExp(**bad)


def test_waveguide_band_must_be_positive():
    with pytest.raises(ValueError):
        Waveguide(0.05, 0.1)


def test_make_density_unknown_name():
    with pytest.raises(ValueError, match="unknown spectral density"):
        make_density("lorentzian", alpha=1)


def test_lags_and_row():
    k = MemoryKernel(PowerExp(1.0, 1.0, 1.0), 0.1)
    lags = k.lags(5)
    assert lags[3] == pytest.approx(k.density.memory(0.3))
    row = kernel_matrix_row(k, 4, range(5))
    np.testing.assert_allclose(row, lags[::-1])
    assert k.lag(-2) == pytest.approx(np.conj(lags[2]))
    with pytest.raises(IndexError):
        kernel_matrix_row(k, 2, [3])


def test_half_value_is_memory_at_half_step():
    k = MemoryKernel(Waveguide(1.0, 0.05), 0.2)
    assert k.half_value == pytest.approx(k.density.memory(0.1))


def test_tabulated_kernel():
    k = MemoryKernel.tabulated([2.0, 0.5j], 0.1)
    assert k.is_finite and k.support_cells == 2
    np.testing.assert_allclose(k.lags(4), [2.0, 0.5j, 0, 0])
    assert eval_memory(k, 0.1) == pytest.approx(0.5j)
    assert eval_memory(k, -0.1) == pytest.approx(-0.5j)
    with pytest.raises(ValueError):
        eval_memory(k, 0.05)
    with pytest.raises(ValueError):
        MemoryKernel.tabulated([-1.0], 0.1)


def test_markov_kernel():
    k = MemoryKernel.markov(2.0, 0.01)
    assert k.m0 == pytest.approx(200.0)
    assert k.lags(3)[1] == 0
