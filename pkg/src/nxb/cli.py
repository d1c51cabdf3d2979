"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numeric divergence. Every command writes only below ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import verify as verify_mod
from .nn import MODES, Network, TrainingDiverged
from .rng import default_seed
from .train import (AXES, PRESETS, ConfigError, ExperimentConfig, ExperimentDiverged,
                    SeedResult, evaluate, load_dataset, result_row, rows_to_csv,
                    run_experiment, sweep)

log = logging.getLogger("nxb")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

_MODE_ALIASES = {"ideal": "ideal", "original": "noisy_original", "decomposed": "noisy_decomposed"}


class UsageError(Exception):
    pass


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock so manifests can be compared byte for byte
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{args.config} is not valid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a JSON object")
        # a run manifest can be fed back in as a config
        if "config" in raw and isinstance(raw["config"], dict) and "tool_version" in raw:
            raw = raw["config"]
    over = {}
    if getattr(args, "regime", None) is not None:
        over["regime"] = args.regime
    if getattr(args, "seed", None) is not None:
        over["seeds"] = list(args.seed)
    elif "seeds" not in raw and os.environ.get("NXB_SEED"):
        over["seeds"] = [default_seed()]
    if getattr(args, "intensity", None) is not None:
        v = args.intensity
        try:
            over["intensity"] = v if v in PRESETS else float(v)
        except ValueError:
            raise ConfigError("intensity", f"{v!r} is neither a preset {sorted(PRESETS)} nor a number") from None
    if getattr(args, "lam", None) is not None:
        over["lam"] = args.lam
    if getattr(args, "bits", None) is not None:
        over["act_bits"] = args.bits
    if getattr(args, "reps", None) is not None:
        over["eval_reps"] = args.reps
    return ExperimentConfig.from_dict({**raw, **over})


def _manifest(args, cfg: ExperimentConfig, out: Path, started: str, command: str) -> dict:
    return {"command": command, "config_path": getattr(args, "config", None), "config": cfg.to_dict(),
            "seeds": list(cfg.seeds), "output_dir": str(out), "tool_version": __version__,
            "started": started, "finished": _timestamp()}


def _history_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "epoch", "loss", "rho"])
    for s in result.metrics.per_seed:
        for epoch, (loss, rhos) in enumerate(zip(s.losses, s.rho_trajectory)):
            w.writerow([s.seed, epoch, f"{loss:.6g}", f"{float(np.mean(rhos)):.6g}"])
    return buf.getvalue()


def cmd_train(args) -> int:
    started = _timestamp()
    cfg = _load_config(args)
    out = Path(args.out)
    ds_train, ds_test = load_dataset(cfg.dataset)
    result = run_experiment(cfg, ds_train, ds_test)
    rows = [result_row(cfg.regime, "none", "", s) for s in result.metrics.per_seed]
    _write(out / "metrics.csv", rows_to_csv(rows))
    _write(out / "history.csv", _history_csv(result))
    _write(out / "checkpoint.json", _dump({str(k): v for k, v in result.checkpoints.items()}))
    _write(out / "manifest.json", _dump(_manifest(args, cfg, out, started, "train")))
    m = result.metrics
    print(f"{cfg.regime}: acc {m.acc_mean:.4f} +/- {m.acc_std:.4f}, energy {m.energy_mean:.6g} "
          f"over seeds {cfg.seeds} -> {out}")
    return EXIT_OK


def _read_checkpoint(path: Path, seed):
    try:
        with open(path) as f:
            ckpt = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except json.JSONDecodeError:
        raise UsageError(f"checkpoint {path} is not valid JSON") from None
    if ckpt.get("format") == "nxb-network/1":
        return None, ckpt
    if not ckpt:
        raise UsageError(f"checkpoint {path} holds no networks")
    key = str(seed) if seed is not None else sorted(ckpt, key=int)[0]
    if key not in ckpt:
        raise UsageError(f"checkpoint has seeds {sorted(ckpt, key=int)}, not {key}")
    return int(key), ckpt[key]


def cmd_eval(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    ckpt_path = Path(args.checkpoint)
    manifest = ckpt_path.parent / "manifest.json"
    if args.config is None and manifest.exists():
        args.config = str(manifest)
    reps, args.reps = args.reps, None
    seed_sel = args.seed[0] if args.seed else None
    args.seed = None
    cfg = _load_config(args)
    seed, d = _read_checkpoint(ckpt_path, seed_sel)
    try:
        net = Network.from_dict(d)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"malformed checkpoint: {exc}") from None
    _, ds_test = load_dataset(cfg.dataset)
    if net.layers[0].in_features != ds_test.n_features:
        raise UsageError(f"checkpoint/layer mismatch: first layer takes {net.layers[0].in_features} "
                         f"features but the dataset has {ds_test.n_features}")
    mode = _MODE_ALIASES.get(args.mode, args.mode)
    if mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}")
    net.mode = mode
    if args.intensity is not None:
        net.device = net.device.with_kappa(cfg.kappa)
    if args.bits is not None:
        net.act_bits = cfg.act_bits
    seed = seed if seed is not None else default_seed()
    acc, std, energy, _ = evaluate(net, ds_test, mode, reps, seed)
    steps = net.planes * len(net.layers)
    print(f"mode {args.mode}: acc {acc:.4f} std {std:.4f} energy {energy:.6g} "
          f"read steps {steps} ({net.planes} planes x {len(net.layers)} layers)")
    if args.out:
        res = SeedResult(seed, acc, std, energy, float(np.mean(net.rho_values())), [], [], [])
        _write(Path(args.out) / "eval.csv", rows_to_csv([result_row("checkpoint", "mode", mode, res)]))
    return EXIT_OK


def _parse_values(axis: str, text: str) -> list:
    out = []
    for v in (s.strip() for s in text.split(",") if s.strip()):
        if axis == "intensity" and v in PRESETS:
            out.append(v)
            continue
        try:
            out.append(int(v) if axis == "bits" else float(v))
        except ValueError:
            raise ConfigError("values", f"cannot parse {v!r} for axis {axis}") from None
    return out


def cmd_sweep(args) -> int:
    started = _timestamp()
    if args.axis not in AXES:
        raise ConfigError("axis", f"unknown sweep axis {args.axis!r}; expected one of {list(AXES)}")
    cfg = _load_config(args)
    values = _parse_values(args.axis, args.values)
    ds_train, ds_test = load_dataset(cfg.dataset)
    res = sweep(cfg, args.axis, values, ds_train, ds_test, jobs=args.jobs)
    out = Path(args.out)
    _write(out / "sweep.csv", res.to_csv())
    if res.infeasible:
        _write(out / "infeasible.json", _dump(res.infeasible))
    manifest = _manifest(args, cfg, out, started, "sweep")
    manifest.update({"axis": args.axis, "values": values})
    _write(out / "manifest.json", _dump(manifest))
    print(f"sweep {args.axis} over {values}: {len(res.rows)} rows, "
          f"{len(res.infeasible)} infeasible -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.instances:
        try:
            with open(args.instances) as f:
                instances = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load instances from {args.instances}: {exc}") from None
    else:
        instances = verify_mod.default_suite()
    try:
        verdict = verify_mod.run_suite(instances, args.trials, args.seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad verification instance: {exc}") from None
    for inst in verdict["instances"]:
        print(f"[{'PASS' if inst['passed'] else 'FAIL'}] {inst['name']}")
        for c in inst["checks"]:
            print(f"    {'ok ' if c['passed'] else 'BAD'} {c['name']}: {c['detail']}")
    print("all checks passed" if verdict["passed"] else "verification FAILED")
    if args.out:
        _write(Path(args.out) / "verify.json", _dump(verdict))
    return EXIT_OK if verdict["passed"] else EXIT_VERIFY


def cmd_gen_data(args) -> int:
    spec = data_mod.LetterSpec(jitter=args.jitter, slant=args.slant, size=args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, n, seed in (("train", args.n_train, args.seed), ("test", args.n_test, args.seed + 1)):
        ds = data_mod.gen_letters(spec, n // 2, seed, split)
        if args.format == "idx":
            data_mod.write_idx(ds, out / f"{split}-images.idx", out / f"{split}-labels.idx")
        else:
            data_mod.write_csv(ds, out / f"{split}.csv")
    print(f"wrote {args.n_train // 2 * 2} train / {args.n_test // 2 * 2} test letters ({args.format}) -> {out}")
    return EXIT_OK


def _add_config_args(p, out_required=True):
    p.add_argument("--config", help="experiment config JSON (a manifest.json also works)")
    p.add_argument("--regime", help="baseline, A, A+B or A+B+C")
    p.add_argument("--seed", type=int, nargs="+", help="seed list (overrides config)")
    p.add_argument("--intensity", help="weak, normal, strong or a numeric kappa")
    p.add_argument("--lambda", dest="lam", type=float, help="energy penalty weight")
    p.add_argument("--bits", type=int, help="activation bits (planes in decomposed mode)")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nxb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nxb {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one regime over the configured seeds")
    _add_config_args(p)
    p.add_argument("--jobs", type=int, default=1, help="worker cap (training itself is serial)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Monte Carlo evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="original", help="ideal, original or decomposed")
    p.add_argument("--reps", type=int, default=32)
    _add_config_args(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one axis; one CSV row per value and seed")
    p.add_argument("--axis", required=True, help=", ".join(AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check variance and energy inequalities against the oracles")
    p.add_argument("--instances", help="JSON list of instances (default: built-in suite)")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for verify.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write the synthetic letters dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("idx", "csv"), default="idx")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--slant", type=float, default=0.25)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error in field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ExperimentDiverged, TrainingDiverged) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
