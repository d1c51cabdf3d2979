"""
Reading an input one bit plane at a time
========================================

Driving a cell once with a 3-bit input x=7 costs 7 units and carries the
cell's noise scaled by 7. Splitting x into its planes 4+2+1 costs one pulse
per set bit and draws fresh states for every plane, so the noise partly
averages out.
"""

import math

from nxb.device import DeviceModel
from nxb.verify import check_inequalities, ledger_energies, stats_decomposed, stats_original

dev = DeviceModel.evenly_spaced(2, 0.1)

ori = stats_original(dev, 1.0, [1.0], [7])
new = stats_decomposed(dev, 1.0, [1.0], [7], bits=3)
print(f"std original {ori.std:.4f}, decomposed {new.std:.4f}, ratio {new.std / ori.std:.4f}"
      f" (sqrt(21)/7 = {math.sqrt(21) / 7:.4f})")

e_ori, e_new = ledger_energies(dev, 1.0, [1.0], [7], bits=3)
print(f"energy original {e_ori:g}, decomposed {e_new:g}")

# a Monte Carlo run agrees with the closed form
mc = stats_decomposed(dev, 1.0, [1.0], [7], bits=3, method="monte_carlo", trials=200_000)
print(f"monte carlo std {mc.std:.4f} +/- {mc.se_std:.4f}")

# a drive of 1 has nothing to split: both costs and spreads coincide
print(check_inequalities(dev, 1.0, [1.0], [1], bits=3).to_dict())
