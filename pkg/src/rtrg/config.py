"""Experiment configuration: YAML file validated into pydantic models."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .kernel import DENSITIES, MemoryKernel, make_density
from .models import PRESETS, QUBIT_OPERATORS, Model, custom


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _complex(value) -> complex:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, str):
        return complex(value.replace(" ", "").replace("i", "j"))
    return complex(value)


def _matrix(value) -> np.ndarray:
    arr = np.array([[_complex(x) for x in row] for row in value], dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError("expected a square matrix")
    return arr


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DensityConfig(_Section):
    name: str
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in DENSITIES:
            raise ValueError(f"unknown spectral density {v!r}; choose from {sorted(DENSITIES)}")
        return v


class KernelConfig(_Section):
    density: Optional[DensityConfig] = None
    lags: Optional[list[Any]] = None
    markov_gamma: Optional[float] = Field(default=None, gt=0)
    horizon_only: bool = False

    @model_validator(mode="after")
    def _one_source(self):
        given = [x is not None for x in (self.density, self.lags, self.markov_gamma)]
        if sum(given) > 1:
            raise ValueError("give only one of density, lags, markov_gamma")
        return self


class ModelConfig(_Section):
    preset: Optional[str] = None
    params: dict[str, Any] = Field(default_factory=dict)
    H_s: Optional[list[list[Any]]] = None
    s_op: Optional[list[list[Any]]] = None
    psi0: Optional[list[Any]] = None
    observables: Optional[list[str]] = None

    @model_validator(mode="after")
    def _preset_or_custom(self):
        if self.preset is None and (self.H_s is None or self.s_op is None):
            raise ValueError("give a preset or both H_s and s_op")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return self


class RgSection(_Section):
    m: int = Field(ge=0)
    n_max: int = Field(ge=0)
    dt: float = Field(gt=0)
    t_end: float = Field(ge=0)
    exact_pairing: bool = False
    disentangler: Literal["exact", "krylov"] = "exact"


class TrajectorySection(_Section):
    n_traj: int = Field(default=2000, ge=1)
    seed: int = Field(default=0, ge=0)
    d_omega: Optional[float] = Field(default=None, gt=0)
    omega_max: Optional[float] = Field(default=None, gt=0)
    importance: bool = True
    batch_size: int = Field(default=64, ge=1)


class ModesSection(_Section):
    t_p: float = Field(gt=0)
    n_eigen: int = Field(default=20, ge=1)
    modes: list[int] = Field(default_factory=lambda: [1])
    dt: Optional[float] = Field(default=None, gt=0)


class OracleSection(_Section):
    kind: Literal["waveguide", "star", "lindblad"]
    L_sites: int = Field(default=10, ge=2)
    n_max: int = Field(default=5, ge=0)
    N_omega: int = Field(default=20, ge=1)
    omega_max: Optional[float] = Field(default=None, gt=0)
    gamma: Optional[float] = Field(default=None, ge=0)


class EntanglementSection(_Section):
    gaps: list[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0])
    p: Optional[int] = Field(default=None, ge=1)
    k: list[int] = Field(default_factory=lambda: [1, 2, 3])
    dt: Optional[float] = Field(default=None, gt=0)


class MarkovSection(_Section):
    gamma: float = Field(default=1.0, gt=0)
    dt: float = Field(default=0.01, gt=0)
    t_end: float = Field(default=5.0, gt=0)


class OutputSection(_Section):
    stride: int = Field(default=1, ge=1)


class RunConfig(_Section):
    model: Optional[ModelConfig] = None
    kernel: Optional[KernelConfig] = None
    rg: Optional[RgSection] = None
    trajectories: Optional[TrajectorySection] = None
    modes: Optional[ModesSection] = None
    oracle: Optional[OracleSection] = None
    entanglement: Optional[EntanglementSection] = None
    markovian: Optional[MarkovSection] = None
    outputs: OutputSection = Field(default_factory=OutputSection)

    def require(self, *names: str):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(name, "section is required for this subcommand")


def _location(loc) -> str:
    return ".".join(str(x) for x in loc)


def parse_config(data: dict) -> RunConfig:
    from pydantic import ValidationError

    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = _location(err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "missing":
            msg = "required field is missing"
        raise ConfigError(field, msg) from None


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return parse_config(data or {})


# --------------------------------------------------------------------------
# building runtime objects
# --------------------------------------------------------------------------
def build_model(cfg: RunConfig) -> Model:
    cfg.require("model")
    mc = cfg.model
    try:
        if mc.preset is not None:
            model = PRESETS[mc.preset](**mc.params)
        else:
            psi0 = np.array([_complex(x) for x in mc.psi0], dtype=complex) if mc.psi0 else None
            H = _matrix(mc.H_s)
            if psi0 is None:
                psi0 = np.zeros(H.shape[0], dtype=complex)
                psi0[-1] = 1
            model = custom(H, _matrix(mc.s_op), psi0)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from None
    if mc.observables is not None:
        obs = {}
        for name in mc.observables:
            if name in model.observables:
                obs[name] = model.observables[name]
            elif name in QUBIT_OPERATORS and model.d_sys == 2:
                obs[name] = QUBIT_OPERATORS[name]
            else:
                raise ConfigError("model.observables", f"unknown observable {name!r}")
        model.observables = obs
    return model


def build_kernel(cfg: RunConfig, dt: float, model: Model | None = None) -> MemoryKernel:
    kc = cfg.kernel or KernelConfig()
    try:
        if kc.markov_gamma is not None:
            return MemoryKernel.markov(kc.markov_gamma, dt)
        if kc.lags is not None:
            return MemoryKernel.tabulated([_complex(x) for x in kc.lags], dt)
        if kc.density is not None:
            return MemoryKernel(make_density(kc.density.name, **kc.density.params), dt)
    except (TypeError, ValueError) as exc:
        raise ConfigError("kernel", str(exc)) from None
    if model is not None and model.density is not None:
        return MemoryKernel(model.density, dt)
    raise ConfigError("kernel", "no kernel given and the model has no default spectral density")


def resolved(cfg: RunConfig) -> dict:
    """Canonical plain-data form of the config (used for the manifest hash)."""
    return cfg.model_dump(mode="json", exclude_none=True)
