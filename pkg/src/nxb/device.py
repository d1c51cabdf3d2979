"""Parametric model of a fluctuating emerging-memory cell.

A cell holding weight ``w`` sits in one of ``m`` states each time it is read.
In state ``l`` it returns ``w * (1 + u_l * A(rho))`` where ``u_l`` is a unit
deviation and ``A(rho) = kappa / rho`` shrinks as the energy coefficient
grows. One read with drive ``x`` costs ``rho * |w| * x + E_peri``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PRESETS = {"weak": 0.5, "normal": 1.0, "strong": 2.0}

_TOL = 1e-12


@dataclass(frozen=True)
class DeviceModel:
    """Immutable cell model; safe to share between threads."""

    m: int = 2
    probs: tuple[float, ...] = (0.5, 0.5)
    deviations: tuple[float, ...] = (-1.0, 1.0)
    kappa: float = 0.1
    peripheral_energy: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        object.__setattr__(self, "deviations", tuple(float(u) for u in self.deviations))
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if len(self.probs) != self.m or len(self.deviations) != self.m:
            raise ValueError("probs and deviations must both have length m")
        if any(p < 0 or p > 1 for p in self.probs):
            raise ValueError("state probabilities must lie in [0, 1]")
        if abs(math.fsum(self.probs) - 1.0) > _TOL:
            raise ValueError(f"state probabilities sum to {math.fsum(self.probs)!r}, not 1")
        mean_dev = math.fsum(p * u for p, u in zip(self.probs, self.deviations))
        if abs(mean_dev) > _TOL:
            raise ValueError(f"deviations must be zero-mean under probs, got {mean_dev!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.peripheral_energy < 0:
            raise ValueError("peripheral_energy must be >= 0")

    @classmethod
    def evenly_spaced(cls, m: int = 2, kappa: float = 0.1, peripheral_energy: float = 0.0) -> "DeviceModel":
        """Uniform state probabilities, deviations evenly spread over [-1, 1]."""
        devs = (0.0,) if m == 1 else tuple(np.linspace(-1.0, 1.0, m))
        return cls(m=m, probs=(1.0 / m,) * m, deviations=devs, kappa=kappa,
                   peripheral_energy=peripheral_energy)

    @classmethod
    def preset(cls, name: str, **kw) -> "DeviceModel":
        try:
            kappa = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown intensity preset {name!r}; expected one of {sorted(PRESETS)}") from None
        return cls.evenly_spaced(2, kappa, **kw)

    def with_kappa(self, kappa: float) -> "DeviceModel":
        return DeviceModel(self.m, self.probs, self.deviations, kappa, self.peripheral_energy)

    @property
    def deviation_variance(self) -> float:
        """Var[u] under the state distribution."""
        mean = math.fsum(p * u for p, u in zip(self.probs, self.deviations))
        return math.fsum(p * (u - mean) ** 2 for p, u in zip(self.probs, self.deviations))

    @property
    def is_binary_symmetric(self) -> bool:
        return self.m == 2 and self.probs == (0.5, 0.5) and self.deviations == (-1.0, 1.0)

    def to_dict(self) -> dict:
        return {"m": self.m, "probs": list(self.probs), "deviations": list(self.deviations),
                "kappa": self.kappa, "peripheral_energy": self.peripheral_energy}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceModel":
        return cls(m=int(d["m"]), probs=tuple(d["probs"]), deviations=tuple(d["deviations"]),
                   kappa=float(d["kappa"]), peripheral_energy=float(d.get("peripheral_energy", 0.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DeviceModel":
        return cls.from_dict(json.loads(text))


def resolve_device(spec) -> DeviceModel:
    """Accept a DeviceModel, a preset name, a bare kappa, or a JSON-style dict."""
    if isinstance(spec, DeviceModel):
        return spec
    if isinstance(spec, str):
        return DeviceModel.preset(spec)
    if isinstance(spec, dict):
        return DeviceModel.from_dict(spec)
    return DeviceModel.evenly_spaced(2, float(spec))


@dataclass
class EnergyCoefficient:
    """Trainable energy coefficient stored as ``theta`` with ``rho = exp(theta)``."""

    theta: float = 0.0

    @classmethod
    def from_rho(cls, rho: float) -> "EnergyCoefficient":
        if rho <= 0:
            raise ValueError("rho must be positive")
        return cls(math.log(rho))

    @property
    def rho(self) -> float:
        return math.exp(self.theta)


@dataclass(frozen=True)
class StateTensor:
    """Sampled fluctuation states: the active state index per read position.

    ``states[..., i, k]`` holds ``l0`` for the cell at row ``i``, column ``k``;
    the one-hot view is available through :meth:`one_hot`.
    """

    states: np.ndarray
    m: int = field(default=2)

    def __post_init__(self):
        s = np.asarray(self.states)
        if s.size and (s.min() < 0 or s.max() >= self.m):
            raise ValueError(f"state indices must lie in [0, {self.m})")
        object.__setattr__(self, "states", s)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.states.shape

    def one_hot(self) -> np.ndarray:
        return self.states[..., None] == np.arange(self.m)

    def deviations(self, model: DeviceModel) -> np.ndarray:
        """Unit deviation ``u_l0`` at every position."""
        return np.asarray(model.deviations)[self.states]


def amplitude(model: DeviceModel, rho: float) -> float:
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho!r}")
    return model.kappa / rho


def effective_weight(model: DeviceModel, w, rho: float, l):
    """Value returned by a cell storing ``w`` when read in state ``l``."""
    l_arr = np.asarray(l)
    if np.any(l_arr < 0) or np.any(l_arr >= model.m):
        raise IndexError(f"state index {l!r} out of range for m={model.m}")
    u = np.asarray(model.deviations)[l_arr]
    out = np.asarray(w, dtype=float) * (1.0 + u * amplitude(model, rho))
    return float(out) if out.ndim == 0 else out


def sample_states(model: DeviceModel, shape: Sequence[int] | int, rng: np.random.Generator) -> StateTensor:
    """Draw one i.i.d. state per position."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if not shape:
        raise ValueError("shape must be non-empty")
    if model.m == 1:
        return StateTensor(np.zeros(shape, dtype=np.int8), 1)
    if model.m == 2 and model.probs == (0.5, 0.5):
        return StateTensor(rng.integers(0, 2, size=shape, dtype=np.int8), 2)
    r = rng.random(shape)
    cum = np.cumsum(model.probs)[:-1]
    states = np.zeros(shape, dtype=np.int8)
    for c in cum:
        states += r >= c
    return StateTensor(states, model.m)


def read_energy(model: DeviceModel, rho: float, w, drive):
    """Energy of one read: ``rho * |w| * drive + E_peri``."""
    drive = np.asarray(drive, dtype=float)
    if np.any(drive < 0):
        raise ValueError("drive must be non-negative")
    out = rho * np.abs(np.asarray(w, dtype=float)) * drive + model.peripheral_energy
    return float(out) if out.ndim == 0 else out
