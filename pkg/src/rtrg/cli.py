"""Command-line batch driver.

    rtrg <subcommand> --config run.yaml [--out-dir DIR] [--threads N]
         [--seed-override S] [--dump-stream]

Exit codes: 0 ok, 2 config error (message names the field), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import (ConfigError, MarkovSection, RunConfig, TrajectorySection, build_kernel, build_model,
                     load_config, resolved)
from .density_rg import MidpointError, RgConfig, run_density_rg
from .kernel import MemoryKernel, make_density
from .krylov import KrylovError
from .metrics import closed_form_entropy, entanglement_entropy_2q, entanglement_entropy_mode
from .models import SIGMA_MINUS, SIGMA_PLUS
from .modes import build_K, build_stream, fastest_decoupling_basis, spectral_peaks, tail_spectrum
from .oracle import exact_star, exact_waveguide, lindblad
from .trajectory_rg import AllTrajectoriesDead, TrajectoryConfig, run_trajectories

log = logging.getLogger("rtrg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (MidpointError, KrylovError, AllTrajectoriesDead, ArithmeticError, np.linalg.LinAlgError,
                    MemoryError)


class Run:
    """Shared state of one invocation: config, output directory, manifest hash."""

    def __init__(self, subcommand: str, cfg: RunConfig, out_dir: Path, threads: int, seed: int | None,
                 dump_stream: bool):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = threads
        self.seed = seed
        self.dump_stream = dump_stream
        self.config_data = resolved(cfg)
        self.digest = io.manifest_hash(subcommand, self.config_data, seed)
        self.files: list[str] = []

    def csv(self, name: str, columns):
        io.write_csv(self.out_dir / name, columns, self.digest)
        self.files.append(name)

    def json(self, name: str, data):
        io.write_json(self.out_dir / name, data, self.digest)
        self.files.append(name)

    def stream(self, kernel, m: int, n_steps: int):
        horizon = bool(self.cfg.kernel and self.cfg.kernel.horizon_only)
        stream = build_stream(kernel, m, n_steps, horizon_only=horizon)
        if self.dump_stream:
            stream.save(self.out_dir / "stream.npz")
            self.files.append("stream.npz")
        return stream


def _rg_config(cfg: RunConfig) -> RgConfig:
    cfg.require("rg")
    r = cfg.rg
    return RgConfig(m=r.m, n_max=r.n_max, dt=r.dt, t_end=r.t_end, disentangler=r.disentangler)


def _strided(values, stride):
    return np.asarray(values)[::stride]


def cmd_modes(run: Run):
    cfg = run.cfg
    cfg.require("modes")
    mc = cfg.modes
    dt = mc.dt if mc.dt is not None else (cfg.rg.dt if cfg.rg else None)
    if dt is None:
        raise ConfigError("modes.dt", "required field is missing (or give rg.dt)")
    model = build_model(cfg) if cfg.model else None
    kernel = build_kernel(cfg, dt, model)
    p = int(round(mc.t_p / dt))
    n_vec = max(mc.n_eigen, max(mc.modes))
    vals, vecs = fastest_decoupling_basis(build_K(kernel, p), min(n_vec, p))
    n_eig = min(mc.n_eigen, len(vals))
    run.csv("modes_spectrum.csv", {"k": np.arange(1, n_eig + 1), "eigenvalue": vals[:n_eig],
                                   "ratio": vals[:n_eig] / vals[0]})
    cells = np.arange(p)
    shapes = {"cell": cells, "t": (cells + 0.5) * dt}
    peaks = {}
    for k in mc.modes:
        if k > vecs.shape[1]:
            raise ConfigError("modes.modes", f"mode {k} exceeds the {vecs.shape[1]} computed eigenvectors")
        phi = vecs[:, k - 1]
        shapes[f"re_phi{k}"] = phi.real
        shapes[f"im_phi{k}"] = phi.imag
        omega, power = tail_spectrum(phi, dt)
        peaks[f"phi{k}"] = spectral_peaks(omega, power, 2)
    run.csv("modes_shapes.csv", shapes)
    run.json("modes.json", {"p": p, "dt": dt, "eigenvalues": vals[:n_eig], "tail_peaks": peaks,
                            "frequency_bin": 2 * np.pi / ((p // 2) * dt)})


def _observable_columns(times, observables, stride, extra=None):
    cols = {"t": _strided(times, stride)}
    for name, vals in observables.items():
        cols[name] = _strided(vals, stride)
    for name, vals in (extra or {}).items():
        cols[name] = _strided(vals, stride)
    return cols


def cmd_density_rg(run: Run):
    cfg = run.cfg
    model = build_model(cfg)
    rcfg = _rg_config(cfg)
    kernel = build_kernel(cfg, rcfg.dt, model)
    stream = run.stream(kernel, rcfg.m, max(rcfg.n_steps, 1))
    res = run_density_rg(stream, model.H_s, model.s_op, model.psi0, rcfg, observables=model.observables,
                         exact_pairing=cfg.rg.exact_pairing)
    nan = np.array([np.nan])
    fl = res.fluxes
    extra = {
        "trace": res.raw_trace,
        "j_in": np.concatenate([nan, [f.j_in for f in fl]]),
        "j_out": np.concatenate([nan, [f.j_out for f in fl]]),
        "n_tot": np.concatenate([nan, [f.n_tot for f in fl]]),
    }
    cols = _observable_columns(res.times, res.observables, cfg.outputs.stride, extra)
    run.csv("density_rg.csv", cols)
    run.json("density_rg.json", cols)


def cmd_trajectory_rg(run: Run):
    cfg = run.cfg
    model = build_model(cfg)
    rcfg = _rg_config(cfg)
    kernel = build_kernel(cfg, rcfg.dt, model)
    tc = cfg.trajectories or TrajectorySection()
    seed = tc.seed if run.seed is None else run.seed
    tcfg = TrajectoryConfig(n_traj=tc.n_traj, seed=seed, d_omega=tc.d_omega, omega_max=tc.omega_max,
                            importance=tc.importance, batch_size=tc.batch_size)
    stream = run.stream(kernel, rcfg.m, max(rcfg.n_steps, 1))
    res = run_trajectories(stream, model.H_s, model.s_op, model.psi0, rcfg, tcfg, model.observables,
                           kernel=kernel, threads=run.threads)
    cols = {"t": _strided(res.times, cfg.outputs.stride)}
    for name in model.observables:
        cols[name] = _strided(res.mean[name], cfg.outputs.stride)
        cols[f"{name}_stderr"] = _strided(res.stderr[name], cfg.outputs.stride)
    cols["mean_weight"] = _strided(res.mean_weight, cfg.outputs.stride)
    run.csv("trajectory_rg.csv", cols)
    run.json("trajectory_rg.json", {**cols, "n_traj": res.n_traj, "n_dead": res.n_dead, "seed": seed})


def cmd_oracle(run: Run):
    cfg = run.cfg
    cfg.require("oracle")
    oc = cfg.oracle
    model = build_model(cfg)
    rcfg = _rg_config(cfg)
    if oc.kind == "waveguide":
        dens = model.density
        if cfg.kernel and cfg.kernel.density is not None:
            dens = make_density(cfg.kernel.density.name, **cfg.kernel.density.params)
        if dens is None or dens.name != "waveguide":
            raise ConfigError("oracle.kind", "waveguide oracle needs a waveguide spectral density")
        res = exact_waveguide(model.H_s, model.s_op, dens.eps, dens.h, oc.L_sites, oc.n_max, rcfg.dt, rcfg.t_end,
                              model.psi0)
    elif oc.kind == "star":
        kernel = build_kernel(cfg, rcfg.dt, model)
        if kernel.density is None:
            raise ConfigError("oracle.kind", "star oracle needs a spectral density")
        res = exact_star(model.H_s, model.s_op, kernel.density, oc.N_omega, oc.n_max, rcfg.dt, rcfg.t_end,
                         model.psi0, omega_max=oc.omega_max)
    else:
        if oc.gamma is None:
            raise ConfigError("oracle.gamma", "required field is missing for the lindblad oracle")
        H = model.hamiltonian(0.0)
        res = lindblad(H, model.s_op, oc.gamma, rcfg.dt, rcfg.t_end, np.outer(model.psi0, model.psi0.conj()))
    obs = {name: res.expectation(op) for name, op in model.observables.items()}
    cols = _observable_columns(res.times, obs, cfg.outputs.stride)
    run.csv("oracle.csv", cols)
    run.json("oracle.json", cols)


def cmd_entanglement(run: Run):
    cfg = run.cfg
    cfg.require("entanglement")
    ec = cfg.entanglement
    dt = ec.dt if ec.dt is not None else (cfg.rg.dt if cfg.rg else 0.1)
    model = build_model(cfg) if cfg.model else None
    kernel = build_kernel(cfg, dt, model)
    gaps = np.asarray(ec.gaps, dtype=float)
    if kernel.density is not None:
        S = np.atleast_1d(entanglement_entropy_2q(kernel.density, gaps))
    else:
        # tabulated kernels live on the cell grid
        gaps = np.round(gaps / dt) * dt
        S = np.array([_tabulated_entropy(kernel, g) for g in gaps])
    run.csv("entanglement_2q.csv", {"gap": gaps, "S2": S})
    data = {"gaps": gaps, "S2": S}
    if ec.p is not None:
        ks = np.asarray(ec.k, dtype=int)
        Sk = np.atleast_1d(entanglement_entropy_mode(kernel, None, ec.p, ks))
        run.csv("entanglement_modes.csv", {"k": ks, "S2": Sk})
        data["modes"] = {"p": ec.p, "k": ks, "S2": Sk}
    run.json("entanglement.json", data)


def _tabulated_entropy(kernel, gap):
    lag = int(round(gap / kernel.dt))
    return closed_form_entropy(kernel.m0, abs(kernel.lags(lag + 1)[lag]) ** 2)


def cmd_markovian_check(run: Run):
    """Density RG with m = 0 on the flat kernel against the Lindblad solution, at dt and dt/2."""
    cfg = run.cfg
    mk = cfg.markovian or MarkovSection()
    H = np.zeros((2, 2), dtype=complex)
    excited = SIGMA_PLUS @ SIGMA_MINUS
    up = np.array([0, 1], dtype=complex)
    rho0 = np.outer(up, up)
    out = {}
    for label, dt in (("dt", mk.dt), ("half_dt", mk.dt / 2)):
        kernel = MemoryKernel.markov(mk.gamma, dt)
        rcfg = RgConfig(m=0, n_max=1, dt=dt, t_end=mk.t_end)
        stream = build_stream(kernel, 0, rcfg.n_steps)
        res = run_density_rg(stream, H, SIGMA_MINUS, rho0, rcfg, observables={"excited": excited})
        out[label] = res
    ref = lindblad(H, SIGMA_MINUS, mk.gamma, mk.dt, mk.t_end, rho0)
    coarse = out["dt"].observables["excited"]
    fine = out["half_dt"].observables["excited"][::2]
    exact = np.exp(-mk.gamma * out["dt"].times)
    cols = {"t": out["dt"].times, "rg": coarse, "rg_half_dt": fine, "lindblad": ref.expectation(excited).real,
            "exact": exact}
    cols = {k: _strided(v, cfg.outputs.stride) for k, v in cols.items()}
    run.csv("markovian.csv", cols)
    summary = {"max_error_vs_exact": float(np.max(np.abs(coarse - exact))),
               "max_error_vs_lindblad": float(np.max(np.abs(coarse - ref.expectation(excited).real))),
               "halving_change": float(np.max(np.abs(coarse - fine)))}
    run.json("markovian.json", summary)


COMMANDS = {
    "modes": cmd_modes,
    "density-rg": cmd_density_rg,
    "trajectory-rg": cmd_trajectory_rg,
    "oracle": cmd_oracle,
    "entanglement": cmd_entanglement,
    "markovian-check": cmd_markovian_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtrg", description="RG for non-Markovian open quantum systems")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "markovian-check", type=Path)
        p.add_argument("--out-dir", type=Path, default=Path("."))
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--dump-stream", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config is not None else RunConfig()
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
    except FileNotFoundError as exc:
        print(f"config error: --config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed_override
    if seed is None and cfg.trajectories is not None:
        seed = cfg.trajectories.seed
    args.out_dir.mkdir(parents=True, exist_ok=True)
    run = Run(args.command, cfg, args.out_dir, args.threads, seed, args.dump_stream)
    start = time.perf_counter()
    try:
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    io.write_manifest(args.out_dir, args.command, run.config_data, seed, run.digest,
                      time.perf_counter() - start, run.files, args.threads)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
