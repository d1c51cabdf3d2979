"""Analog in-memory inference on fluctuating memory cells.

Submodules: ``device`` (cell model), ``crossbar`` (MAC and energy metering),
``nn`` (quantized MLP with manual backprop), ``data`` (letters task, IDX),
``train`` (regimes, evaluation, sweeps), ``verify`` (statistical oracles)
and ``cli``.
"""

from .crossbar import Crossbar, EnergyLedger, decompose, mac_decomposed, mac_original, program
from .device import PRESETS, DeviceModel, EnergyCoefficient, StateTensor, sample_states
from .nn import Network, forward, backward
from .rng import stream
from .train import ExperimentConfig, run_experiment, sweep

__version__ = "0.1.0"

__all__ = [
    "Crossbar", "EnergyLedger", "decompose", "mac_decomposed", "mac_original", "program",
    "PRESETS", "DeviceModel", "EnergyCoefficient", "StateTensor", "sample_states",
    "Network", "forward", "backward", "stream", "ExperimentConfig", "run_experiment", "sweep",
]
