"""
Noise-aware training on the letters task
========================================

Trains the four regimes on a reduced letters dataset (two seeds, 8x8
glyphs) and prints accuracy under noisy evaluation next to the energy
spent. Takes around a minute on one core.
"""

from nxb.train import ExperimentConfig, load_dataset, run_experiment

base = ExperimentConfig(intensity="strong", seeds=[0, 1], eval_reps=8, hidden=[32],
                        dataset={"kind": "letters", "n_train": 1000, "n_test": 300, "size": 8,
                                 "jitter": 0.3, "slant": 0.25, "seed": 1234})
train, test = load_dataset(base.dataset)

for regime in ("baseline", "A", "A+B", "A+B+C"):
    m = run_experiment(base.replace(regime=regime), train, test).metrics
    rhos = [round(s.rho_final, 3) for s in m.per_seed]
    print(f"{regime:8s} acc {m.acc_mean:.4f} +/- {m.acc_std:.4f}  energy {m.energy_mean:10.4g}  rho {rhos}")
