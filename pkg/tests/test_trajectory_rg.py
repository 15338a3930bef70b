import numpy as np
import pytest

from rtrg.density_rg import RgConfig, run_density_rg
from rtrg.kernel import MemoryKernel, PowerExp
from rtrg.models import DOWN, SIGMA_MINUS, UP, driven_qubit_waveguide
from rtrg.modes import build_stream
from rtrg.trajectory_rg import (
    NoiseGenerator,
    TrajectoryConfig,
    ensemble_statistics,
    gauss_hermite_average,
    run_trajectories,
    trajectory_seed,
)

H_TOY = np.diag([0, 0.3]).astype(complex) + 0.2 * np.array([[0, 1], [1, 0]])
PSI_TOY = (UP + 0.5 * DOWN) / np.linalg.norm(UP + 0.5 * DOWN)


def single_tone(dt, n, omega0=0.7):
    """Kernel e^{-i omega0 t}: rank-one K, so one relevant mode is exact."""
    lags = np.exp(-1j * omega0 * dt * np.arange(n + 2))
    return MemoryKernel.tabulated(lags, dt, half_value=np.exp(-0.5j * omega0 * dt))


def gh_vs_density(dt, n, order=12):
    k = single_tone(dt, n)
    stream = build_stream(k, 1, n, horizon_only=True)
    cfg = RgConfig(m=1, n_max=3, dt=dt, t_end=n * dt)
    ref = run_density_rg(stream, H_TOY, SIGMA_MINUS, np.outer(PSI_TOY, PSI_TOY.conj()), cfg, exact_pairing=True)
    gen = NoiseGenerator(k, n, method="covariance")
    avg = gauss_hermite_average(stream, H_TOY, SIGMA_MINUS, PSI_TOY, cfg, gen.factor, order)
    return np.max(np.abs(avg - ref.rho_s)), avg


def test_gauss_hermite_matches_density_rg_to_midpoint_order():
    # pure-state and density-matrix midpoint rules differ at O(dt^3) per step
    coarse, avg = gh_vs_density(0.1, 3)
    fine, _ = gh_vs_density(0.05, 3)
    assert coarse < 1e-3
    assert coarse / fine > 6
    np.testing.assert_allclose(np.trace(avg, axis1=1, axis2=2).real, 1.0, atol=1e-10)


def test_covariance_factor_reproduces_kernel():
    k = single_tone(0.1, 10)
    gen = NoiseGenerator(k, 10, method="covariance")
    cov = gen.factor @ gen.factor.conj().T
    assert gen.n_components == 1
    np.testing.assert_allclose(cov[:, 0], k.lags(10), atol=1e-12)


def test_spectral_noise_statistics():
    dt, n = 0.1, 40
    k = MemoryKernel(PowerExp(0.5, 1.0, 1.0), dt)
    gen = NoiseGenerator(k, n)
    assert gen.covariance_error < 1e-2 * abs(k.m0)
    n_samples = 20_000
    xi = gen.from_gaussians(gen.unit_gaussians(7, n_samples))
    est = (xi * xi[0].conj()).mean(axis=1)
    target = gen.factor @ gen.factor[0].conj()
    # sampling error of |xi|^2-type averages is about M(0) / sqrt(n_samples)
    assert np.max(np.abs(est - target)) < 5 * abs(k.m0) / np.sqrt(n_samples)
    assert abs(np.mean(xi[3] * xi[5])) < 5 * abs(k.m0) / np.sqrt(n_samples)


def test_noise_generator_validation():
    k = MemoryKernel.tabulated([1.0, 0.5], 0.1)
    with pytest.raises(ValueError):
        NoiseGenerator(k, 5, method="spectral")
    with pytest.raises(ValueError):
        NoiseGenerator(k, 5, method="white")


@pytest.fixture(scope="module")
def waveguide_setup():
    model = driven_qubit_waveguide()
    dt = 0.1
    k = MemoryKernel(model.density, dt)
    cfg = RgConfig(m=2, n_max=2, dt=dt, t_end=2.0)
    return model, k, build_stream(k, 2, cfg.n_steps), cfg


def run(setup, **kw):
    model, k, stream, cfg = setup
    threads = kw.pop("threads", 1)
    tcfg = TrajectoryConfig(**{"n_traj": 24, "batch_size": 8, **kw})
    return run_trajectories(stream, model.H_s, model.s_op, model.psi0, cfg, tcfg, model.observables,
                            kernel=k, threads=threads, keep_per_trajectory=True)


def test_results_do_not_depend_on_threads(waveguide_setup):
    a = run(waveguide_setup, threads=1)
    b = run(waveguide_setup, threads=3)
    np.testing.assert_array_equal(a.mean["excited"], b.mean["excited"])
    np.testing.assert_array_equal(a.stderr["excited"], b.stderr["excited"])


def test_seed_changes_noise(waveguide_setup):
    a = run(waveguide_setup, seed=0)
    b = run(waveguide_setup, seed=1)
    assert not np.array_equal(a.mean["excited"], b.mean["excited"])
    assert not np.array_equal(np.random.default_rng(trajectory_seed(0, 1)).random(4),
                              np.random.default_rng(trajectory_seed(1, 0)).random(4))


def test_trajectory_mean_tracks_density_rg(waveguide_setup):
    model, k, stream, cfg = waveguide_setup
    ref = run_density_rg(stream, model.H_s, model.s_op, np.outer(model.psi0, model.psi0.conj()), cfg,
                         observables=model.observables)
    res = run(waveguide_setup, n_traj=400, batch_size=64)
    diff = np.abs(res.mean["excited"] - ref.observables["excited"])
    assert np.all(diff <= 4 * res.stderr["excited"] + 1e-3)
    assert res.n_dead == 0


def test_ratio_estimator_without_importance():
    log_w = np.log(np.array([[1.0, 1.0], [2.0, 0.5]]))
    vals = {"x": np.array([[0.0, 1.0], [1.0, 0.0]])}
    mean, stderr, wbar = ensemble_statistics(vals, log_w, importance=False)
    np.testing.assert_allclose(mean["x"], [0.5, 0.8])
    np.testing.assert_allclose(wbar, [1.0, 1.25])
    mean_is, _, _ = ensemble_statistics(vals, log_w, importance=True)
    np.testing.assert_allclose(mean_is["x"], [0.5, 0.5])
