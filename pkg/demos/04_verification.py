"""
Cross-checking the statistics three ways
========================================

Closed form, exhaustive enumeration of every joint cell state and Monte
Carlo through the actual crossbar code should all agree. The built-in
suite runs the same comparison on a handful of instances.
"""

import numpy as np

from nxb.device import DeviceModel
from nxb.verify import default_suite, run_suite, stats_decomposed

dev = DeviceModel(m=3, probs=(0.3, 0.5, 0.2), deviations=(-1.0, 0.0, 1.5), kappa=0.3)
w, x = np.array([0.7, -1.2, 0.4]), np.array([5, 2, 7])

for method in ("closed_form", "enumeration", "monte_carlo"):
    r = stats_decomposed(dev, 1.5, w, x, bits=3, method=method, trials=100_000)
    print(f"{method:12s} mean {r.mean:+.5f}  variance {r.variance:.6f}")

verdict = run_suite(default_suite(), mc_trials=50_000)
for inst in verdict["instances"]:
    print(("PASS " if inst["passed"] else "FAIL ") + inst["name"])
