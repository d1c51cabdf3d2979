"""Experiment pipeline: regimes, Monte Carlo evaluation and sweeps.

Regimes build on one another. ``baseline`` trains noise-unaware in ideal mode
and is then evaluated on the noisy hardware; ``A`` fine-tunes through sampled
fluctuations; ``A+B`` also trains the energy coefficient under the energy
penalty; ``A+B+C`` does so with bit-decomposed execution. Every regime starts
from the same pretrained ideal model of its seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .crossbar import EnergyLedger
from .data import Dataset, LetterSpec, batches, gen_letters
from .device import PRESETS, DeviceModel, resolve_device
from .nn import (LossConfig, Network, TrainingDiverged, forward, make_optimizer,
                 reference_read_counts, train_step)
from .rng import stream

log = logging.getLogger(__name__)

REGIMES = ("baseline", "A", "A+B", "A+B+C")
AXES = ("lambda", "intensity", "energy_budget", "bits")
RESULT_HEADER = ["regime", "axis", "value", "seed", "acc_mean", "acc_std", "energy_mean", "rho_final"]

# regime -> (fine-tune mode, trains rho, uses lambda, evaluation mode)
_GATES = {
    "baseline": ("ideal", False, False, "noisy_original"),
    "A": ("noisy_original", False, False, "noisy_original"),
    "A+B": ("noisy_original", True, True, "noisy_original"),
    "A+B+C": ("noisy_decomposed", True, True, "noisy_decomposed"),
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _default_dataset() -> dict:
    return {"kind": "letters", "n_train": 2000, "n_test": 500, "size": 16,
            "jitter": 0.3, "slant": 0.25, "seed": 1234}


@dataclass
class ExperimentConfig:
    regime: str = "A+B+C"
    intensity: str | float = "strong"
    act_bits: int = 8
    weight_bits: int = 8
    lam: float = 1e-3
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    pretrain_epochs: int = 10
    epochs: int = 10
    batch_size: int = 64
    eval_reps: int = 32
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    hidden: list[int] = field(default_factory=lambda: [64])
    rho_init: float = 1.0
    peripheral_energy: float = 0.0
    shared_rho: bool = True
    eval_kappa: float | None = None
    budget_lambda_max: float = 1.0
    dataset: dict = field(default_factory=_default_dataset)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError("regime", f"unknown regime {self.regime!r}; expected one of {list(REGIMES)}")
        if isinstance(self.intensity, str) and self.intensity not in PRESETS:
            raise ConfigError("intensity", f"unknown preset {self.intensity!r}; expected one of {sorted(PRESETS)}")
        if not isinstance(self.intensity, str) and float(self.intensity) < 0:
            raise ConfigError("intensity", "kappa must be non-negative")
        if self.lam < 0:
            raise ConfigError("lam", "lambda must be non-negative")
        if self.act_bits < 1 or self.act_bits > 16:
            raise ConfigError("act_bits", "activation bits must lie in [1, 16]")
        if self.weight_bits < 2:
            raise ConfigError("weight_bits", "weight bits must be >= 2")
        if self.eval_reps < 1:
            raise ConfigError("eval_reps", "need at least one repetition")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if self.rho_init <= 0:
            raise ConfigError("rho_init", "must be positive")

    @property
    def kappa(self) -> float:
        return PRESETS[self.intensity] if isinstance(self.intensity, str) else float(self.intensity)

    def device(self, kappa: float | None = None) -> DeviceModel:
        return DeviceModel.evenly_spaced(2, self.kappa if kappa is None else kappa, self.peripheral_energy)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        alias = {"lambda": "lam"}
        kw = {}
        for k, v in d.items():
            k = alias.get(k, k)
            if k not in known:
                raise ConfigError(k, "unknown config field")
            kw[k] = v
        if "dataset" in kw:
            kw["dataset"] = {**_default_dataset(), **kw["dataset"]}
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None


@dataclass
class SeedResult:
    seed: int
    acc_mean: float
    acc_std: float
    energy_mean: float
    rho_final: float
    accuracies: list[float]
    losses: list[float]
    rho_trajectory: list[list[float]]


@dataclass
class Metrics:
    regime: str
    acc_mean: float
    acc_std: float
    energy_mean: float
    per_seed: list[SeedResult]
    wall_clock: float

    @property
    def train_loss(self) -> list[list[float]]:
        return [s.losses for s in self.per_seed]

    @property
    def rho_trajectory(self) -> list[list[list[float]]]:
        return [s.rho_trajectory for s in self.per_seed]


@dataclass
class ExperimentResult:
    metrics: Metrics
    checkpoints: dict[int, dict]


class ExperimentDiverged(RuntimeError):
    def __init__(self, message: str, partial: list[SeedResult]):
        super().__init__(message)
        self.partial = partial


def load_dataset(spec: dict) -> tuple[Dataset, Dataset]:
    kind = spec.get("kind", "letters")
    if kind == "letters":
        letters = LetterSpec(jitter=spec["jitter"], slant=spec["slant"], size=spec["size"])
        seed = spec["seed"]
        train = gen_letters(letters, spec["n_train"] // 2, seed, "train")
        test = gen_letters(letters, spec["n_test"] // 2, seed + 1, "test")
        return train, test
    if kind == "idx":
        train = data_mod.load_idx(spec["train_images"], spec["train_labels"], "train")
        test = data_mod.load_idx(spec["test_images"], spec["test_labels"], "test")
        n_train, n_test = spec.get("n_train"), spec.get("n_test")
        if n_train:
            train = train.subset(slice(0, n_train))
        if n_test:
            test = test.subset(slice(0, n_test))
        return train, test
    raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}")


def _fingerprint(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _shuffle_seed(seed: int, *keys) -> int:
    return int(stream(seed, "shuffle", *keys).integers(0, 2 ** 32))


def _fit(net: Network, ds: Dataset, cfg: ExperimentConfig, seed: int, phase: str, epochs: int,
         lam: float, train_rho: bool):
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
    losses, rhos = [], []
    for epoch in range(epochs):
        loss_cfg = LossConfig(lam, reference_read_counts(net) if lam > 0 else None)
        noise = stream(seed, "noise", phase, epoch)
        total, count = 0.0, 0
        for x, y in batches(ds, cfg.batch_size, _shuffle_seed(seed, phase, epoch)):
            total += train_step(net, opt, x, y, loss_cfg, noise, train_rho) * len(y)
            count += len(y)
        losses.append(total / count)
        rhos.append(net.rho_values())
    return losses, rhos


_PRETRAINED: dict[str, dict] = {}


def pretrain(cfg: ExperimentConfig, ds_train: Dataset, seed: int) -> Network:
    """Noise-unaware model trained in ideal mode; cached per (config, data, seed)."""
    key = json.dumps([cfg.hidden, cfg.act_bits, cfg.weight_bits, cfg.optimizer, cfg.lr, cfg.momentum,
                      cfg.pretrain_epochs, cfg.batch_size, cfg.rho_init, cfg.shared_rho, seed,
                      _fingerprint(ds_train.images, ds_train.labels)])
    if key not in _PRETRAINED:
        sizes = [ds_train.n_features, *cfg.hidden, max(2, ds_train.n_classes)]
        net = Network.mlp(sizes, stream(seed, "init"), cfg.device(0.0), rho=cfg.rho_init,
                          mode="ideal", act_bits=cfg.act_bits, weight_bits=cfg.weight_bits,
                          shared_rho=cfg.shared_rho)
        _fit(net, ds_train, cfg, seed, "pretrain", cfg.pretrain_epochs, 0.0, False)
        _PRETRAINED[key] = net.to_dict()
    return Network.from_dict(_PRETRAINED[key])


def train_regime(cfg: ExperimentConfig, ds_train: Dataset, seed: int):
    """Fine-tune the pretrained model under ``cfg.regime``; returns (net, losses, rho trajectory)."""
    mode, train_rho, use_lam, _ = _GATES[cfg.regime]
    net = pretrain(cfg, ds_train, seed)
    net.device = cfg.device()
    net.mode = mode
    lam = cfg.lam if use_lam else 0.0
    losses, rhos = _fit(net, ds_train, cfg, seed, cfg.regime, cfg.epochs, lam, train_rho)
    return net, losses, rhos


def evaluate(net: Network, ds_test: Dataset, mode: str, eval_reps: int, seed: int,
             kappa: float | None = None, hold_states: bool = False, batch_size: int = 250):
    """Monte Carlo accuracy and per-inference energy.

    Each repetition re-samples every state. Returns
    ``(acc_mean, acc_std, energy_mean, accuracies)``; the std uses ``ddof=1``
    and is 0 for a single repetition.
    """
    if eval_reps < 1:
        raise ValueError("eval_reps must be >= 1")
    if kappa is not None:
        net = Network(net.layers, net.device.with_kappa(kappa), net.mode, net.act_bits,
                      net.weight_bits, net.shared_rho, net.version)
    reps = 1 if mode == "ideal" else eval_reps
    accs, energies = [], []
    for rep in range(reps):
        ledger = EnergyLedger()
        correct = 0
        for b, (x, y) in enumerate(batches(ds_test, batch_size)):
            rng = stream(seed, "eval", rep, b) if not hold_states else stream(seed, "eval", rep)
            logits, _ = forward(net, x, rng, ledger, mode=mode, hold_states=hold_states)
            correct += int(np.sum(logits.argmax(axis=1) == y))
        accs.append(correct / len(ds_test))
        energies.append(ledger.total_energy / len(ds_test))
    accs = accs * (eval_reps // reps)
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return float(np.mean(accs)), std, float(np.mean(energies)), accs


def run_seed(cfg: ExperimentConfig, ds_train: Dataset, ds_test: Dataset, seed: int):
    net, losses, rhos = train_regime(cfg, ds_train, seed)
    eval_mode = _GATES[cfg.regime][3]
    acc, std, energy, accs = evaluate(net, ds_test, eval_mode, cfg.eval_reps, seed, cfg.eval_kappa)
    rho_final = float(np.mean(net.rho_values()))
    return SeedResult(seed, acc, std, energy, rho_final, accs, losses, rhos), net


def run_experiment(cfg: ExperimentConfig, ds_train: Dataset, ds_test: Dataset) -> ExperimentResult:
    start = time.perf_counter()
    per_seed, checkpoints = [], {}
    for seed in cfg.seeds:
        try:
            res, net = run_seed(cfg, ds_train, ds_test, seed)
        except TrainingDiverged as exc:
            raise ExperimentDiverged(f"seed {seed}: {exc}", per_seed) from exc
        per_seed.append(res)
        checkpoints[seed] = net.to_dict()
    all_accs = [a for s in per_seed for a in s.accuracies]
    metrics = Metrics(cfg.regime, float(np.mean(all_accs)),
                      float(np.std(all_accs, ddof=1)) if len(all_accs) > 1 else 0.0,
                      float(np.mean([s.energy_mean for s in per_seed])), per_seed,
                      time.perf_counter() - start)
    return ExperimentResult(metrics, checkpoints)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def result_row(regime: str, axis: str, value, r: SeedResult) -> dict:
    return {"regime": regime, "axis": axis, "value": value, "seed": r.seed, "acc_mean": r.acc_mean,
            "acc_std": r.acc_std, "energy_mean": r.energy_mean, "rho_final": r.rho_final}


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in RESULT_HEADER])
    return buf.getvalue()


@dataclass
class SweepResult:
    rows: list[dict]
    infeasible: list[dict]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lambda":
        return cfg.replace(lam=float(value))
    if axis == "intensity":
        return cfg.replace(intensity=value if isinstance(value, str) and value in PRESETS else float(value))
    if axis == "bits":
        return cfg.replace(act_bits=int(value))
    raise ConfigError("axis", f"unknown sweep axis {axis!r}; expected one of {list(AXES)}")


def _budget_point(cfg: ExperimentConfig, ds_train, ds_test, seed: int, budget: float):
    """Smallest lambda (8 bisection steps on log-lambda) meeting the energy budget."""
    chance = 1.0 / max(2, ds_train.n_classes)

    def probe(lam):
        res, _ = run_seed(cfg.replace(lam=lam), ds_train, ds_test, seed)
        return res

    best = probe(0.0)
    if best.energy_mean <= budget:
        return best, 0.0
    hi = cfg.budget_lambda_max
    top = probe(hi)
    if top.energy_mean > budget or top.acc_mean < chance:
        return None, hi
    lo, best, best_lam = math.log(hi) - 6 * math.log(10), top, hi
    hi_log = math.log(hi)
    for _ in range(8):
        mid = 0.5 * (lo + hi_log)
        res = probe(math.exp(mid))
        if res.energy_mean <= budget:
            hi_log, best, best_lam = mid, res, math.exp(mid)
        else:
            lo = mid
    return best, best_lam


def _sweep_point(args):
    cfg, axis, value, seed, ds_train, ds_test = args
    if axis == "energy_budget":
        res, lam = _budget_point(cfg.replace(seeds=[seed]), ds_train, ds_test, seed, float(value))
        if res is None:
            return None, {"regime": cfg.regime, "axis": axis, "value": value, "seed": seed, "lambda_max": lam}
        return result_row(cfg.regime, axis, value, res), None
    point = _apply_axis(cfg, axis, value).replace(seeds=[seed])
    res, _ = run_seed(point, ds_train, ds_test, seed)
    return result_row(cfg.regime, axis, value, res), None


def _axis_key(axis: str, value):
    if axis == "intensity" and isinstance(value, str) and value in PRESETS:
        return PRESETS[value]
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


def sweep(base_cfg: ExperimentConfig, axis: str, values, ds_train: Dataset, ds_test: Dataset,
          jobs: int = 1) -> SweepResult:
    """One row per (value, seed), sorted by axis value then seed."""
    if axis not in AXES:
        raise ConfigError("axis", f"unknown sweep axis {axis!r}; expected one of {list(AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("values", "sweep needs at least one value")
    if axis != "energy_budget":
        for v in values:
            _apply_axis(base_cfg, axis, v)
    tasks = [(base_cfg, axis, v, s, ds_train, ds_test) for v in values for s in base_cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = [r for r, _ in results if r is not None]
    infeasible = [f for _, f in results if f is not None]
    for f in infeasible:
        log.warning("infeasible energy budget %s for seed %s", f["value"], f["seed"])
    rows.sort(key=lambda r: (_axis_key(axis, r["value"]), r["seed"]))
    return SweepResult(rows, infeasible)
