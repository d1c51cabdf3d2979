"""Minimal MLP engine whose dense layers execute on simulated crossbars.

Forward passes in the noisy modes draw fresh fluctuation states for every
sample and record the draw on a tape; :func:`backward` differentiates the
sampled network with the draw held fixed. Weight and activation quantizers
pass gradients straight through.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .crossbar import (EnergyLedger, decomposed_noise, original_noise, popcount,
                       quantize_activations, quantize_weights)
from .device import DeviceModel, EnergyCoefficient

MODES = ("ideal", "noisy_original", "noisy_decomposed")
ACTIVATIONS = ("relu", "identity")


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    theta: np.ndarray
    activation: str = "relu"
    name: str = "layer0"
    act_max: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if not isinstance(self.theta, np.ndarray):
            self.theta = np.array(float(self.theta))
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError(f"{self.name}: bias does not match weight rows")

    @property
    def rho(self) -> float:
        return math.exp(float(self.theta))

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class Network:
    layers: list[DenseLayer]
    device: DeviceModel = field(default_factory=DeviceModel)
    mode: str = "ideal"
    act_bits: int | None = 8
    weight_bits: int | None = 8
    shared_rho: bool = False
    version: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_features != b.in_features:
                raise ValueError(f"{a.name} outputs {a.out_features} but {b.name} takes {b.in_features}")
        if self.shared_rho:
            for layer in self.layers[1:]:
                layer.theta = self.layers[0].theta

    @classmethod
    def mlp(cls, sizes, rng: np.random.Generator, device: DeviceModel | None = None,
            rho: float = 1.0, **kw) -> "Network":
        """He-initialised ReLU MLP with an identity head."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = math.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            act = "identity" if i == len(sizes) - 2 else "relu"
            layers.append(DenseLayer(w, np.zeros(n_out), np.array(math.log(rho)), act, f"layer{i}"))
        return cls(layers, device or DeviceModel(), **kw)

    @property
    def planes(self) -> int:
        return self.act_bits if self.mode == "noisy_decomposed" else 1

    def rho_values(self) -> list[float]:
        return [layer.rho for layer in self.layers]

    def parameters(self, train_rho: bool = True) -> dict[str, np.ndarray]:
        params = {}
        for layer in self.layers:
            params[f"{layer.name}.weight"] = layer.weight
            params[f"{layer.name}.bias"] = layer.bias
        if train_rho:
            params.update(self._thetas())
        return params

    def _thetas(self) -> dict[str, np.ndarray]:
        if self.shared_rho:
            return {"shared.theta": self.layers[0].theta}
        return {f"{layer.name}.theta": layer.theta for layer in self.layers}

    def _theta_key(self, layer: DenseLayer) -> str:
        return "shared.theta" if self.shared_rho else f"{layer.name}.theta"

    def copy(self) -> "Network":
        return Network.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            wq, scale = quantize_weights(layer.weight, self.weight_bits)
            d = {"name": layer.name, "activation": layer.activation,
                 "weight": layer.weight.tolist(), "bias": layer.bias.tolist(),
                 "theta": float(layer.theta), "act_max": layer.act_max, "weight_scale": scale}
            if self.weight_bits is not None:
                d["codes"] = np.rint(wq / scale).astype(int).tolist()
            layers.append(d)
        return {"format": "nxb-network/1", "device": self.device.to_dict(), "mode": self.mode,
                "act_bits": self.act_bits, "weight_bits": self.weight_bits,
                "shared_rho": self.shared_rho, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("format") != "nxb-network/1":
            raise ValueError(f"not a network checkpoint (format={d.get('format')!r})")
        layers = [DenseLayer(np.asarray(l["weight"]), np.asarray(l["bias"]), np.array(l["theta"]),
                             l["activation"], l["name"], l["act_max"]) for l in d["layers"]]
        return cls(layers, DeviceModel.from_dict(d["device"]), d["mode"], d["act_bits"],
                   d["weight_bits"], d["shared_rho"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class LayerTape:
    a: np.ndarray            # layer input activations
    x: np.ndarray            # drive, in quantizer levels
    scale: float             # activation scale / levels
    a_scale: float
    wq: np.ndarray
    amp: float
    z: np.ndarray            # pre-activation
    noise: np.ndarray | None  # N = sum_k w V
    v: np.ndarray | None      # sampled deviation term V


@dataclass
class Tape:
    layers: list[LayerTape]
    mode: str
    version: int


def _drive_levels(bits: int | None) -> int:
    return 1 if bits is None else 2 ** bits - 1


def forward(net: Network, x: np.ndarray, rng: np.random.Generator | None = None,
            ledger: EnergyLedger | None = None, *, training: bool = False,
            mode: str | None = None, hold_states: bool = False):
    """Run the network on a batch ``x`` of shape ``(batch, features)``.

    Returns ``(logits, tape)``. ``training`` calibrates activation scales on
    the batch maximum and updates each layer's running maximum; otherwise the
    frozen running maximum is used. ``hold_states`` reuses one state draw for
    every sample in the batch.
    """
    mode = mode or net.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "ideal" and rng is None:
        raise ValueError("noisy modes need a random stream")
    if mode == "noisy_decomposed" and net.act_bits is None:
        raise ValueError("decomposed execution needs integer drives (act_bits)")
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.shape[1] != net.layers[0].in_features:
        raise ValueError(f"input has {a.shape[1]} features, network expects {net.layers[0].in_features}")
    if np.any(a < 0):
        raise ValueError("crossbar drives must be non-negative")
    levels = _drive_levels(net.act_bits)
    records = []
    for layer in net.layers:
        batch_max = float(a.max()) if a.size else 0.0
        if training:
            layer.act_max = max(layer.act_max, batch_max)
            a_scale = batch_max
        else:
            a_scale = layer.act_max if layer.act_max > 0 else batch_max
        if a_scale <= 0:
            a_scale = 1.0
        xd = quantize_activations(a, net.act_bits, a_scale)
        s = a_scale / levels
        wq, _ = quantize_weights(layer.weight, net.weight_bits)
        rho = layer.rho
        amp = net.device.kappa / rho
        ideal = xd @ wq.T
        noise = v = None
        if mode == "ideal":
            z = s * ideal + layer.bias
        else:
            draws = 1 if hold_states else None
            if mode == "noisy_original":
                noise, v = original_noise(net.device, wq, xd, rng, draws)
            else:
                noise, v = decomposed_noise(net.device, wq, xd, net.act_bits, rng, draws)
            z = s * (ideal + amp * noise) + layer.bias
        if ledger is not None:
            _charge(ledger, net, layer, wq, xd, rho, mode)
        records.append(LayerTape(a, xd, s, a_scale, wq, amp, z, noise, v))
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return a, Tape(records, mode, net.version)


def _charge(ledger, net, layer, wq, xd, rho, mode):
    n = xd.shape[0]
    e_peri = net.device.peripheral_energy
    if mode == "noisy_decomposed":
        pulses = popcount(xd).sum(axis=0)
        reads = net.act_bits * n
    else:
        pulses = xd.sum(axis=0)
        reads = n
    e = rho * float(np.sum(np.abs(wq) @ pulses)) + e_peri * reads * wq.size
    ledger.charge(layer.name, e, np.full(wq.shape, reads, dtype=np.int64))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -float(logp[idx, labels].mean())
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return loss, grad / n


@dataclass
class LossConfig:
    """Energy-regularization weight and per-cell read counts (alpha)."""

    lam: float = 0.0
    alpha: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def reference_read_counts(net: Network, mode: str | None = None) -> dict[str, np.ndarray]:
    """Reads per cell during one inference, taken from a single-sample ledger."""
    ledger = EnergyLedger()
    probe = Network([DenseLayer(l.weight, l.bias, l.theta.copy(), l.activation, l.name, l.act_max)
                     for l in net.layers], net.device.with_kappa(0.0), net.mode, net.act_bits,
                    net.weight_bits)
    forward(probe, np.zeros((1, net.layers[0].in_features)), np.random.default_rng(0), ledger,
            mode=mode or net.mode)
    return {k: v.astype(float) for k, v in ledger.read_counts.items()}


def energy_penalty(net: Network, cfg: LossConfig) -> float:
    if cfg.lam == 0:
        return 0.0
    total = 0.0
    for layer in net.layers:
        wq, _ = quantize_weights(layer.weight, net.weight_bits)
        alpha = _alpha(cfg, layer)
        total += layer.rho * float(np.sum(alpha * np.abs(wq)))
    return cfg.lam * total


def _alpha(cfg: LossConfig, layer: DenseLayer):
    if cfg.alpha is None:
        return 1.0
    return cfg.alpha[layer.name]


def loss_with_energy_reg(logits, labels, net: Network, cfg: LossConfig) -> float:
    """Cross-entropy plus ``lam * sum_t alpha_t * rho * |w_t|`` over all crossbars."""
    ce, _ = cross_entropy(logits, labels)
    return ce + energy_penalty(net, cfg)


def backward(net: Network, tape: Tape, dlogits: np.ndarray, cfg: LossConfig | None = None,
             need_input_grad: bool = False) -> dict[str, np.ndarray]:
    """Gradients for every weight, bias and theta, the sampled noise held fixed."""
    if tape.version != net.version:
        raise RuntimeError("stale tape: parameters changed since the forward pass")
    grads: dict[str, np.ndarray] = {}
    dout = dlogits
    for idx in range(len(net.layers) - 1, -1, -1):
        layer, rec = net.layers[idx], tape.layers[idx]
        dz = dout * (rec.z > 0) if layer.activation == "relu" else dout
        grads[f"{layer.name}.bias"] = dz.sum(axis=0)
        dw = rec.scale * (dz.T @ rec.x)
        dtheta = 0.0
        if rec.noise is not None:
            dw = dw + rec.scale * rec.amp * np.einsum("bi,bik->ik", dz, rec.v)
            # A = kappa * exp(-theta)  =>  dA/dtheta = -A
            dtheta = -rec.amp * rec.scale * float(np.sum(dz * rec.noise))
        grads[f"{layer.name}.weight"] = dw
        key = net._theta_key(layer)
        grads[key] = grads.get(key, 0.0) + np.array(dtheta)
        if idx > 0 or need_input_grad:
            da = dz @ rec.wq
            if rec.noise is not None:
                ratio = np.divide(rec.v, rec.x[:, None, :], out=np.zeros(rec.v.shape),
                                  where=rec.x[:, None, :] > 0)
                da = da + rec.amp * np.einsum("bi,ik,bik->bk", dz, rec.wq, ratio)
            dout = da * (rec.a <= rec.a_scale)
    if cfg is not None and cfg.lam > 0:
        for layer in net.layers:
            wq, _ = quantize_weights(layer.weight, net.weight_bits)
            alpha = _alpha(cfg, layer)
            rho = layer.rho
            grads[f"{layer.name}.weight"] = grads[f"{layer.name}.weight"] + cfg.lam * alpha * rho * np.sign(wq)
            key = net._theta_key(layer)
            grads[key] = grads[key] + cfg.lam * rho * float(np.sum(alpha * np.abs(wq)))
    if need_input_grad:
        grads["input"] = dout
    return grads


class SGD:
    """SGD with heavy-ball momentum: ``v = mu * v + g; p -= lr * v``."""

    kind = "sgd"

    def __init__(self, lr: float = 0.1, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        for k, p in params.items():
            g = grads[k]
            if self.momentum:
                buf = self.buffers.get(k)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[k] = buf
                g = buf
            p -= self.lr * g

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum,
                "buffers": {k: np.asarray(v).tolist() for k, v in sorted(self.buffers.items())}}


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "t": self.t,
                "m": {k: np.asarray(v).tolist() for k, v in sorted(self.m.items())},
                "v": {k: np.asarray(v).tolist() for k, v in sorted(self.v.items())}}


def make_optimizer(kind: str, lr: float, momentum: float = 0.9):
    if kind == "sgd":
        return SGD(lr, momentum)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def _check_finite(grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {k}")


def train_step(net: Network, opt, x, y, cfg: LossConfig, rng, train_rho: bool = True) -> float:
    """One optimizer step on a batch; returns the regularized loss."""
    logits, tape = forward(net, x, rng, training=True)
    ce, dlogits = cross_entropy(logits, y)
    loss = ce + energy_penalty(net, cfg)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    grads = backward(net, tape, dlogits, cfg)
    opt.step(net.parameters(train_rho), grads)
    net.version += 1
    return loss
