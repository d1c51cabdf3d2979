"""Crossbar execution: programming, MAC in original and bit-decomposed modes,
and read-energy metering.

Shapes follow the row-per-output convention: ``weights`` is ``(rows, cols)``,
an input is ``(cols,)`` or a batch ``(batch, cols)``, and the matching
state tensor is ``(rows, cols)`` or ``(batch, rows, cols)``; every sample in a
batch reads every cell once, so each gets its own states.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .device import (DeviceModel, EnergyCoefficient, StateTensor, amplitude,
                     sample_states)


@dataclass(frozen=True)
class Crossbar:
    weights: np.ndarray
    bias: np.ndarray
    rho: EnergyCoefficient
    device: DeviceModel
    weight_bits: int | None = 8
    weight_scale: float = 1.0
    name: str = "xb0"

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise ValueError(f"bias length {b.shape[0]} does not match {w.shape[0]} rows")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def effective_weights(self, states: StateTensor) -> np.ndarray:
        """``r(w, rho)`` selected by ``states`` (the Hadamard-with-one-hot sum)."""
        u = states.deviations(self.device)
        return self.weights * (1.0 + u * amplitude(self.device, self.rho.rho))

    def to_dict(self) -> dict:
        d = {"name": self.name, "theta": self.rho.theta, "weight_bits": self.weight_bits,
             "weight_scale": self.weight_scale, "bias": self.bias.tolist(),
             "device": self.device.to_dict()}
        if self.weight_bits is None:
            d["weights"] = self.weights.tolist()
        else:
            d["codes"] = np.rint(self.weights / self.weight_scale).astype(int).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Crossbar":
        if "codes" in d:
            weights = np.asarray(d["codes"], dtype=float) * d["weight_scale"]
        else:
            weights = np.asarray(d["weights"], dtype=float)
        return cls(weights, np.asarray(d["bias"]), EnergyCoefficient(d["theta"]),
                   DeviceModel.from_dict(d["device"]), d["weight_bits"], d["weight_scale"], d["name"])


@dataclass
class EnergyLedger:
    """Accumulated read energy and per-cell read counts, keyed by crossbar name.

    Ledgers only grow. Merge per-thread ledgers with ``+``.
    """

    energy: dict[str, float] = field(default_factory=dict)
    read_counts: dict[str, np.ndarray] = field(default_factory=dict)

    def charge(self, name: str, energy: float, counts: np.ndarray) -> None:
        if energy < 0:
            raise ValueError("energy charges must be non-negative")
        self.energy[name] = self.energy.get(name, 0.0) + float(energy)
        if name in self.read_counts:
            self.read_counts[name] = self.read_counts[name] + counts
        else:
            self.read_counts[name] = np.array(counts, dtype=np.int64)

    @property
    def total_energy(self) -> float:
        return sum(self.energy[k] for k in sorted(self.energy))

    def reads(self, name: str) -> int:
        return int(self.read_counts[name].sum()) if name in self.read_counts else 0

    def __add__(self, other: "EnergyLedger") -> "EnergyLedger":
        out = EnergyLedger(dict(self.energy), {k: v.copy() for k, v in self.read_counts.items()})
        for name in other.energy:
            out.charge(name, other.energy[name], other.read_counts[name])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["crossbar", "reads", "energy"])
        for name in sorted(self.energy):
            w.writerow([name, self.reads(name), f"{self.energy[name]:.6g}"])
        return buf.getvalue()


@dataclass(frozen=True)
class BitPlanes:
    """Binary expansion of non-negative integer drives.

    ``planes`` lists ``(p, delta_p)`` with ``sum_p delta_p * 2**p`` equal to
    the quantized input; ``scale`` converts the integer-domain MAC result back
    to activation units.
    """

    planes: list[tuple[int, np.ndarray]]
    bits: int
    scale: float = 1.0

    def reconstruct(self) -> np.ndarray:
        return sum(d.astype(np.int64) << p for p, d in self.planes)


def quantize_weights(w: np.ndarray, bits: int | None) -> tuple[np.ndarray, float]:
    """Symmetric linear quantization onto ``2**(bits-1) - 1`` levels per sign."""
    w = np.asarray(w, dtype=float)
    if bits is None:
        return w.copy(), 1.0
    if bits < 2:
        raise ValueError("weight_bits must be >= 2")
    levels = 2 ** (bits - 1) - 1
    wmax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = wmax / levels if wmax > 0 else 1.0
    codes = np.clip(np.rint(w / scale), -levels, levels)
    return codes * scale, scale


def quantize_activations(a: np.ndarray, bits: int | None, scale: float) -> np.ndarray:
    """Map non-negative activations onto drive levels ``0 .. 2**bits - 1``.

    Values above ``scale`` saturate. Without ``bits`` the drive stays real-valued.
    """
    levels = 1 if bits is None else 2 ** bits - 1
    x = np.clip(np.asarray(a, dtype=float) / scale, 0.0, 1.0) * levels
    return x if bits is None else np.rint(x)


def program(weights_float, bias, weight_bits: int | None, rho: EnergyCoefficient,
            device: DeviceModel | None = None, name: str = "xb0") -> Crossbar:
    w = np.atleast_2d(np.asarray(weights_float, dtype=float))
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    wq, scale = quantize_weights(w, weight_bits)
    return Crossbar(wq, np.asarray(bias, dtype=float), rho, device or DeviceModel(),
                    weight_bits, scale, name)


def _batched(xb: Crossbar, x: np.ndarray, states: StateTensor):
    rows, cols = xb.shape
    single = x.ndim == 1
    xs = x[None] if single else x
    s = states.states[None] if states.states.ndim == 2 else states.states
    if xs.ndim != 2 or xs.shape[1] != cols:
        raise ValueError(f"input has shape {x.shape}, crossbar expects {cols} columns")
    if s.shape != (xs.shape[0], rows, cols):
        raise ValueError(f"states have shape {states.shape}, expected {(xs.shape[0], rows, cols)}")
    return single, xs, StateTensor(s, states.m)


def mac_original(xb: Crossbar, x, states: StateTensor, ledger: EnergyLedger | None = None,
                 *, scale: float = 1.0, drive_levels: int = 1) -> np.ndarray:
    """One analog read per cell: ``y = scale * (r(W) o S) x + b``.

    ``x`` is the normalized drive in [0, 1]; ``drive_levels`` converts it to
    energy units (one unit = one full-amplitude binary pulse).
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("drive must lie in [0, 1]")
    single, xs, st = _batched(xb, x, states)
    wt = xb.effective_weights(st)
    y = scale * np.einsum("bik,bk->bi", wt, xs) + xb.bias
    if ledger is not None:
        rho = xb.rho.rho
        drive = xs.sum(axis=0) * drive_levels
        e = rho * float(np.sum(np.abs(xb.weights) @ drive))
        n = xs.shape[0]
        e += xb.device.peripheral_energy * n * xb.weights.size
        ledger.charge(xb.name, e, np.full(xb.shape, n, dtype=np.int64))
    return y[0] if single else y


def decompose(x_quantized, bits: int, scale: float = 1.0) -> BitPlanes:
    x = np.asarray(x_quantized)
    if not np.all(np.equal(np.mod(x, 1), 0)):
        raise ValueError("decompose expects integer drives")
    x = x.astype(np.int64)
    if np.any(x < 0) or np.any(x >= 2 ** bits):
        raise ValueError(f"drives must lie in [0, 2**{bits})")
    return BitPlanes([(p, ((x >> p) & 1).astype(np.int8)) for p in range(bits)], bits, scale)


def sample_plane_states(model: DeviceModel, bits: int, shape, rng: np.random.Generator) -> list[StateTensor]:
    """Independent state tensors, one per bit plane.

    For the symmetric two-state cell the planes are unpacked from one random
    integer per position; :func:`decomposed_noise` uses the same draw.
    """
    if model.is_binary_symmetric and bits <= 16:
        packed = _packed_bits(rng, bits, shape)
        return [StateTensor(((packed >> p) & 1).astype(np.int8), 2) for p in range(bits)]
    return [sample_states(model, shape, rng) for _ in range(bits)]


def _packed_bits(rng, bits, shape):
    dtype = np.uint8 if bits <= 8 else np.uint16
    return rng.integers(0, 2 ** bits, size=shape, dtype=dtype)


def mac_decomposed(xb: Crossbar, planes: BitPlanes, states_per_step: list[StateTensor],
                   ledger: EnergyLedger | None = None) -> np.ndarray:
    """Bit-serial MAC: ``y = scale * sum_p 2**p (r(W) o S_p) delta_p + b``.

    Each plane is a separate read of every cell with its own state sample.
    """
    if len(states_per_step) != len(planes.planes):
        raise ValueError(f"{len(planes.planes)} planes but {len(states_per_step)} state tensors")
    acc = None
    single = False
    for (p, delta), st in zip(planes.planes, states_per_step):
        single, ds, st_b = _batched(xb, np.asarray(delta, dtype=float), st)
        part = np.einsum("bik,bk->bi", xb.effective_weights(st_b), ds) * float(2 ** p)
        acc = part if acc is None else acc + part
    y = planes.scale * acc + xb.bias
    if ledger is not None:
        rho = xb.rho.rho
        n = None
        pulses = 0
        for _, delta in planes.planes:
            d = np.atleast_2d(delta)
            n = d.shape[0]
            pulses = pulses + d.sum(axis=0)
        e = rho * float(np.sum(np.abs(xb.weights) @ pulses))
        reads = len(planes.planes) * n
        e += xb.device.peripheral_energy * reads * xb.weights.size
        ledger.charge(xb.name, e, np.full(xb.shape, reads, dtype=np.int64))
    return y[0] if single else y


# Factored kernels for the training engine. With W~ = W * (1 + A*u), a MAC
# splits into the ideal product plus A times a noise term that depends only on
# the sampled deviations; keeping the split makes zero-amplitude runs
# bit-identical to ideal ones and gives the gradient its pieces directly.

def original_noise(model: DeviceModel, w: np.ndarray, x: np.ndarray, rng: np.random.Generator,
                   draws: int | None = None):
    """Return ``(N, V)`` with ``V[b,i,k] = u[b,i,k] * x[b,k]`` and ``N = sum_k w V``.

    ``draws=1`` shares one state sample across the batch.
    """
    shape = (draws or x.shape[0],) + w.shape
    if model.is_binary_symmetric:
        u = 2 * rng.integers(0, 2, size=shape, dtype=np.int8) - 1
    else:
        u = sample_states(model, shape, rng).deviations(model)
    v = u * x[:, None, :]
    return np.einsum("ik,bik->bi", w, v), v


def decomposed_noise(model: DeviceModel, w: np.ndarray, xq: np.ndarray, bits: int,
                     rng: np.random.Generator, draws: int | None = None):
    """Return ``(N, V)`` with ``V[b,i,k] = sum_p 2**p delta_p[b,k] u_p[b,i,k]``."""
    shape = (draws or xq.shape[0],) + w.shape
    xi = xq.astype(np.int64)
    if model.is_binary_symmetric and bits <= 16:
        # u = 2s - 1 per plane, so V = 2 * (x & R) - x with R the packed states
        packed = _packed_bits(rng, bits, shape)
        xb = xi[:, None, :].astype(packed.dtype)
        v = 2 * (xb & packed).astype(np.int32) - xi[:, None, :].astype(np.int32)
    else:
        v = np.zeros((xq.shape[0],) + w.shape)
        for p in range(bits):
            delta = ((xi >> p) & 1)[:, None, :]
            v += (2 ** p) * delta * sample_states(model, shape, rng).deviations(model)
    return np.einsum("ik,bik->bi", w, v), v


def popcount(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    out = np.zeros_like(x)
    while np.any(x):
        out += x & 1
        x = x >> 1
    return out
