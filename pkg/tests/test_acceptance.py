"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 6 to 8 train full desk-scale models (five seeds, 2000 letters) and
take several minutes each; they share pretrained models through the
pipeline's cache.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from gradcheck import check, rel_err
from nxb.crossbar import popcount
from nxb.device import DeviceModel
from nxb.nn import LossConfig, Network, reference_read_counts
from nxb.rng import stream
from nxb.train import ExperimentConfig, evaluate, load_dataset, run_experiment
from nxb.verify import ledger_energies, stats_decomposed, stats_original

REPORT: list[str] = []


def report(n, ok, detail, elapsed=None, limit=None):
    timing = "" if elapsed is None else f" [{elapsed:.1f}s, limit {limit}s]"
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}{timing}"
    REPORT.append(line)
    print(line)
    return ok


# exact oracles -------------------------------------------------------------

def test_criterion_1_variance_ratio():
    t0 = time.perf_counter()
    dev = DeviceModel.evenly_spaced(2, 0.1)
    target = math.sqrt(21) / 7
    mc_o = stats_original(dev, 1.0, [1.0], [7], "monte_carlo", trials=10 ** 6, seed=0)
    mc_n = stats_decomposed(dev, 1.0, [1.0], [7], 3, "monte_carlo", trials=10 ** 6, seed=0)
    ratio = mc_n.std / mc_o.std
    cf_n = stats_decomposed(dev, 1.0, [1.0], [7], 3)
    en_n = stats_decomposed(dev, 1.0, [1.0], [7], 3, "enumeration")
    cf_o = stats_original(dev, 1.0, [1.0], [7])
    en_o = stats_original(dev, 1.0, [1.0], [7], "enumeration")
    enum_err = max(abs(cf_n.std - en_n.std), abs(cf_o.std - en_o.std))
    elapsed = time.perf_counter() - t0
    ok = abs(ratio / target - 1) <= 0.02 and enum_err <= 1e-12 and elapsed < 60
    report(1, ok, f"MC std ratio {ratio:.5f} vs sqrt(21)/7={target:.5f} "
                  f"(rel dev {abs(ratio / target - 1):.2%}, tol 2%); enumeration vs closed form {enum_err:.1e}",
           elapsed, 60)
    assert ok


def _energy_instances(n_inst, seed):
    g = stream(seed, "criterion2")
    for _ in range(n_inst):
        bits = int(g.integers(1, 9))
        n = int(g.integers(1, 9))
        x = g.integers(0, 2 ** bits, size=n)
        w = g.normal(size=n) * (g.random(n) > 0.2)
        yield bits, w, x


def test_criterion_2_energy_ratio():
    t0 = time.perf_counter()
    dev = DeviceModel.evenly_spaced(2, 0.1)
    e_o, e_n = ledger_energies(dev, 1.0, [1.0], [7], 3)
    exact = e_n / e_o == 3 / 7 and (e_o, e_n) == (7.0, 3.0)
    bad_order = bad_eq = 0
    for bits, w, x in _energy_instances(1000, 0):
        e_o, e_n = ledger_energies(dev, 1.0, w, x, bits)
        if e_n > e_o * (1 + 1e-12):
            bad_order += 1
        # a cell's pulses equal its drive exactly when the drive is 0 or 1
        expect_equal = bool(np.all(x[w != 0] <= 1))
        if (abs(e_n - e_o) <= 1e-12 * max(e_o, 1e-300)) != expect_equal:
            bad_eq += 1
    elapsed = time.perf_counter() - t0
    ok = exact and bad_order == 0 and bad_eq == 0 and elapsed < 10
    report(2, ok, f"E_new/E_ori for x=7 is {3}/{7} exactly: {exact}; 1000 random instances: "
                  f"{bad_order} with E_new > E_ori, {bad_eq} with equality not matching 'every active drive <= 1'",
           elapsed, 10)
    assert ok


@pytest.mark.xfail(strict=True, reason="the 'equality iff popcount <= 1' wording contradicts the exact 3/7 "
                                       "ratio: a single set bit at p >= 1 costs 1 pulse against a drive of 2^p")
def test_criterion_2_literal_popcount_clause():
    dev = DeviceModel.evenly_spaced(2, 0.1)
    mismatches = []
    for bits, w, x in _energy_instances(1000, 0):
        e_o, e_n = ledger_energies(dev, 1.0, w, x, bits)
        literal = bool(np.all(popcount(x[w != 0]) <= 1))
        if (abs(e_n - e_o) <= 1e-12 * max(e_o, 1e-300)) != literal:
            mismatches.append((x.tolist(), e_n / e_o))
    report("2 (literal clause)", not mismatches,
           f"'equality iff popcount <= 1' contradicted by {len(mismatches)}/1000 instances, "
           f"e.g. x=4 gives E_new/E_ori = {ledger_energies(dev, 1.0, [1.0], [4], 3)[1] / 4:.2f}")
    assert not mismatches


def test_criterion_3_unbiasedness():
    t0 = time.perf_counter()
    g = stream(0, "criterion3")
    worst, fails = 0.0, 0
    for i in range(100):
        m = int(g.integers(1, 4))
        dev = DeviceModel.evenly_spaced(m, float(g.uniform(0.05, 0.5)))
        n = int(g.integers(1, 9))
        bits = int(g.integers(1, 9))
        w = g.normal(size=n)
        x = g.integers(0, 2 ** bits, size=n)
        rho = float(g.uniform(0.5, 2.0))
        ideal = float(w @ x)
        for fn in (lambda: stats_original(dev, rho, w, x, "monte_carlo", trials=20_000, seed=i),
                   lambda: stats_decomposed(dev, rho, w, x, bits, "monte_carlo", trials=20_000, seed=i)):
            r = fn()
            z = abs(r.mean - ideal) / r.se_mean if r.se_mean > 0 else (0.0 if abs(r.mean - ideal) < 1e-9 else math.inf)
            worst = max(worst, z)
            fails += z > 3
    elapsed = time.perf_counter() - t0
    ok = fails == 0 and elapsed < 60
    report(3, ok, f"100 instances x 2 modes, 20000 trials each: {fails} outside 3 SE, worst |z| = {worst:.2f}",
           elapsed, 60)
    assert ok


def test_criterion_4_oracle_equivalence():
    t0 = time.perf_counter()
    g = stream(0, "criterion4")
    count, worst = 0, 0.0
    for n in range(1, 5):
        for m in range(1, 4):
            for bits in range(1, 4):
                for _ in range(6):
                    dev = DeviceModel.evenly_spaced(m, float(g.uniform(0, 0.6)))
                    rho = float(g.uniform(0.3, 3))
                    w = g.normal(size=n)
                    x = g.integers(0, 2 ** bits, size=n)
                    pairs = [(stats_original(dev, rho, w, x), stats_original(dev, rho, w, x, "enumeration")),
                             (stats_decomposed(dev, rho, w, x, bits),
                              stats_decomposed(dev, rho, w, x, bits, "enumeration"))]
                    for cf, en in pairs:
                        worst = max(worst, abs(cf.mean - en.mean) / max(1.0, abs(cf.mean)),
                                    abs(cf.variance - en.variance) / max(1.0, cf.variance))
                    count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 200 and worst <= 1e-12 and elapsed < 60
    report(4, ok, f"{count} instances (n<=4, m<=3, planes<=3), both modes: worst relative gap {worst:.2e} "
                  f"(tol 1e-12)", elapsed, 60)
    assert ok


def test_criterion_5_gradient_checks():
    t0 = time.perf_counter()
    g = stream(0, "criterion5")
    x = g.random((16, 32))
    y = g.integers(0, 4, 16)
    results = []
    for mode, sizes, act_bits in (("ideal", [32, 16, 4], None), ("noisy_original", [32, 16, 4], None),
                                  ("noisy_decomposed", [32, 4], 8)):
        net = Network.mlp(sizes, stream(1, mode), DeviceModel(kappa=0.5), rho=0.7, mode=mode,
                          act_bits=act_bits, weight_bits=None)
        cfg = LossConfig(1e-3, reference_read_counts(net))
        results += [(mode,) + r for r in check(net, x, y, cfg, 2, mode, 10 ** 6, np.random.default_rng(0))]
    errs = np.array([rel_err(a, n) for _, _, _, a, n in results])
    frac = float(np.mean(errs <= 1e-4))
    two_layer = sum(1 for r in results if r[0] == "noisy_original")
    classes = {r[1].split(".")[-1] for r in results}
    elapsed = time.perf_counter() - t0
    ok = frac >= 0.95 and two_layer >= 500 and classes == {"weight", "bias", "theta"} and elapsed < 60
    report(5, ok, f"{len(errs)} coordinates ({two_layer} on the noisy 2-layer net), {frac:.1%} within rel err 1e-4, "
                  f"max {errs.max():.1e}", elapsed, 60)
    assert ok


# desk-scale training --------------------------------------------------------

@pytest.fixture(scope="module")
def letters():
    return load_dataset(ExperimentConfig().dataset)


def _regime(cfg, data):
    tr, te = data
    return run_experiment(cfg, tr, te)


@pytest.mark.slow
def test_criterion_6_regime_ordering(letters):
    t0 = time.perf_counter()
    base = ExperimentConfig(intensity="strong")
    res = {r: _regime(base.replace(regime=r), letters).metrics for r in ("baseline", "A", "A+B", "A+B+C")}
    acc = {r: m.acc_mean for r, m in res.items()}
    energy = {r: m.energy_mean for r, m in res.items()}
    gap = acc["A"] - acc["baseline"]
    ok = (gap >= 0.05 and acc["A+B+C"] >= acc["A+B"] - 0.005 and energy["A+B+C"] < energy["A+B"])
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 900
    report(6, ok, "strong, 5 seeds: acc " + ", ".join(f"{r} {a:.4f}" for r, a in acc.items())
           + f"; A - baseline = {gap * 100:.1f} pp; energy A+B {energy['A+B']:.4g} vs A+B+C {energy['A+B+C']:.4g}",
           elapsed, 900)
    assert ok


@pytest.mark.slow
def test_criterion_7_lambda_monotonicity(letters):
    t0 = time.perf_counter()
    base = ExperimentConfig(regime="A+B", intensity="normal")
    lams = [0.0, 1e-4, 1e-3, 1e-2]
    energies, rho_bad = [], []
    for lam in lams:
        m = _regime(base.replace(lam=lam), letters).metrics
        energies.append(m.energy_mean)
        if lam > 0:
            rho_bad += [(lam, s.seed, s.rho_final) for s in m.per_seed if not s.rho_final < base.rho_init]
    corr = spearmanr(lams, energies).statistic
    elapsed = time.perf_counter() - t0
    ok = corr <= -0.8 and not rho_bad and elapsed < 900
    report(7, ok, "A+B normal, 5 seeds: energy " + ", ".join(f"{l:g}:{e:.4g}" for l, e in zip(lams, energies))
           + f"; Spearman {corr:.2f}; runs with final rho >= initial: {rho_bad or 'none'}", elapsed, 900)
    assert ok


@pytest.mark.slow
def test_criterion_8_robustness(letters):
    t0 = time.perf_counter()
    tr, te = letters
    drops = {}
    for level in ("weak", "normal", "strong"):
        for regime in ("baseline", "A", "A+B", "A+B+C"):
            cfg = ExperimentConfig(regime=regime, intensity=level, lam=0.0)
            out = run_experiment(cfg, tr, te)
            mode = "noisy_decomposed" if regime == "A+B+C" else "noisy_original"
            ceiling = np.mean([evaluate(Network.from_dict(out.checkpoints[s]), te, mode, 1, s, kappa=0.0)[0]
                               for s in cfg.seeds])
            drops[level, regime] = float(ceiling - out.metrics.acc_mean)
    failing = [lv for lv in ("weak", "normal", "strong")
               if drops[lv, "A+B+C"] > min(drops[lv, r] for r in ("baseline", "A", "A+B"))]
    elapsed = time.perf_counter() - t0
    ok = not failing and elapsed < 1200
    detail = "; ".join(f"{lv}: " + ", ".join(f"{r} {drops[lv, r] * 100:.2f}" for r in ("baseline", "A", "A+B", "A+B+C"))
                       for lv in ("weak", "normal", "strong"))
    report(8, ok, f"drop from kappa=0 ceiling in pp, 5 seeds, lambda=0 ({detail}); failing levels: {failing or 'none'}",
           elapsed, 1200)
    assert ok


# determinism ----------------------------------------------------------------

def _cli(args, env):
    return subprocess.run([sys.executable, "-m", "nxb.cli", *args], env=env, capture_output=True, text=True)


def _snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seeds": [0, 1], "pretrain_epochs": 2, "epochs": 1, "eval_reps": 3, "hidden": [8],
                               "dataset": {"n_train": 200, "n_test": 100, "size": 8}}))
    env = {**os.environ, "SOURCE_DATE_EPOCH": "1700000000"}
    env.pop("NXB_SEED", None)
    commands = {
        "train": ["train", "--config", str(cfg), "--regime", "A+B+C"],
        "sweep": ["sweep", "--config", str(cfg), "--regime", "A+B", "--axis", "lambda", "--values", "0,1e-3"],
        "verify": ["verify", "--trials", "20000"],
    }
    differing = []
    for name, args in commands.items():
        snaps = []
        for run in range(2):
            out = tmp_path / name
            r = _cli(args + ["--out", str(out)], env)
            assert r.returncode == 0, r.stderr
            snaps.append(_snapshot(out))
            for p in sorted(out.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
        if snaps[0] != snaps[1] or not snaps[0]:
            differing.append(name)
    ok = not differing
    report(9, ok, f"train/sweep/verify repeated twice: byte-identical outputs "
                  f"({'all' if ok else 'differ: ' + ', '.join(differing)})")
    assert ok
