"""
Fluctuating cells and the cost of a read
========================================

A single cell stores a weight w, but every read returns w * (1 + u * kappa / rho)
where u is the cell's current state deviation. Raising the energy coefficient
rho buys a quieter read at a proportionally higher price.
"""

import numpy as np

from nxb.device import DeviceModel, effective_weight, read_energy, sample_states
from nxb.rng import stream

dev = DeviceModel.preset("normal")
print(dev)

# draw many independent reads of w = 0.5 at three energy settings
rng = stream(0, "demo", "cells")
w = 0.5
for rho in (0.5, 1.0, 4.0):
    states = sample_states(dev, 100_000, rng)
    r = effective_weight(dev, w, rho, states.states)
    print(f"rho={rho:<4} mean read {r.mean():.4f}  std {r.std():.4f}  "
          f"energy per unit drive {read_energy(dev, rho, w, 1):.3f}")

# the read is unbiased and its spread shrinks like 1/rho
print("predicted std at rho=1:", w * dev.kappa * np.sqrt(dev.deviation_variance))
