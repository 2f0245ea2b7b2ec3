"""Command-line entry point: ``ebcharge {train,evaluate,oracle-check,compare}``.

Every command writes plain CSV outputs plus a ``manifest.json`` into its
run directory.  ``--out`` names that directory; without it a directory
under ``$EBCHARGE_OUT`` (default ``./runs``) is used.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, data_path
from .agents import (MODES, PolicyBundle, Trainer, episodes_to_converge, eval_protocol, evaluate, write_log,
                     write_trace)
from .config import ConfigError, RunConfig, dump_config, load_config
from .env import BusChargingEnv
from .oracle import FAIL, INCONCLUSIVE, COARSE, InstanceError, check_option_equivalence, load_instance
from .prices import PriceDataError, load_prices, split_train_test
from .qnet import ArchitectureMismatch, TrainingFault

log = logging.getLogger("ebcharge")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_VERDICT_FAIL = 5
EXIT_VERDICT_INCONCLUSIVE = 6

OUT_ENV = "EBCHARGE_OUT"
DEFAULT_CONFIG = "default.ini"
BUS_SPACING_MINUTES = 30
TABLE_LABELS = "ABCDEFGHIJ"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return __version__
    desc = out.stdout.strip()
    return f"{__version__}+{desc}" if out.returncode == 0 and desc else __version__


def _out_dir(arg, default_name: str) -> Path:
    path = Path(arg) if arg else Path(os.environ.get(OUT_ENV, "runs")) / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_price_file(cfg: RunConfig, config_path: Path) -> Path:
    if not cfg.price_file:
        raise DataError(f"{config_path}: no [data] price_file given")
    p = Path(cfg.price_file)
    for cand in (p, config_path.parent / p, Path(data_path(p.name))):
        if cand.exists():
            return cand.resolve()
    raise DataError(f"price file {cfg.price_file} not found (looked next to {config_path})")


@dataclasses.dataclass
class Loaded:
    config_path: Path
    run: RunConfig
    price_path: Path
    train_prices: object
    test_prices: object


def _load(config_arg, episodes=None, bus_offset=None) -> Loaded:
    config_path = Path(config_arg) if config_arg else Path(data_path(DEFAULT_CONFIG))
    if not config_path.exists():
        raise DataError(f"config file {config_path} not found")
    try:
        run = load_config(config_path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if episodes is not None:
        if episodes <= 0:
            raise UsageError("--episodes must be positive")
        tc = run.train
        # keep the phase switch at the same fraction of the run
        phase = int(round(tc.phase_threshold * episodes / tc.episodes))
        run = dataclasses.replace(run, train=dataclasses.replace(tc, episodes=episodes, phase_threshold=phase))
    if bus_offset is not None:
        run = dataclasses.replace(run, env=dataclasses.replace(run.env, bus_offset_minutes=bus_offset))
    price_path = _resolve_price_file(run, config_path)
    try:
        series = load_prices(price_path, run.env.dt_minutes)
        train, test = split_train_test(series, run.train.train_days)
    except PriceDataError as exc:
        raise DataError(str(exc)) from None
    run = dataclasses.replace(run, price_file=str(price_path))
    return Loaded(config_path, run, price_path, train, test)


def write_manifest(out: Path, command: str, loaded: Loaded, seeds, extra=None) -> dict:
    """Snapshot of everything needed to repeat the run; written before any training."""
    (out / "config.ini").write_text(dump_config(loaded.run))
    manifest = {
        "command": command,
        "version": version_string(),
        "seeds": list(seeds),
        "config": dump_config(loaded.run),
        "config_file": str(out / "config.ini"),
        "data": {str(loaded.price_path): _sha256(loaded.price_path),
                 str(loaded.config_path): _sha256(loaded.config_path)},
        "out": str(out),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _mode(name: str) -> str:
    if name not in MODES:
        raise UsageError(f"unknown mode {name!r}; choose from {', '.join(MODES)}")
    return name


def _int_list(raw: str, what: str):
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers") from None


def _envs(loaded: Loaded):
    cfg = loaded.run.env
    return BusChargingEnv(cfg, loaded.train_prices), BusChargingEnv(cfg, loaded.test_prices)


# ---------------------------------------------------------------------------
# commands

def train_run(loaded: Loaded, mode: str, seed: int, out: Path, progress=None):
    """Train one (mode, seed); writes manifest, curve.csv and checkpoint.npz into ``out``."""
    write_manifest(out, "train", loaded, [seed], {"mode": mode})
    env, test_env = _envs(loaded)
    tc = loaded.run.train
    trainer = Trainer(mode, env, tc, range(loaded.train_prices.n_days), test_env,
                      range(loaded.test_prices.n_days), seed=seed)
    result = trainer.train(out / "curve.csv", progress=progress)
    result.bundle.save(out / "checkpoint.npz", extra={"seed": seed})
    return result


def cmd_train(args) -> int:
    mode = _mode(args.mode)
    loaded = _load(args.config, args.episodes)
    out = _out_dir(args.out, f"{mode}-seed{args.seed}")

    def progress(row):
        if row["eval_mean"] != "":
            log.info("episode %d  eval %.4f", row["episode"], row["eval_mean"])

    result = train_run(loaded, mode, args.seed, out, progress)
    print(f"trained {mode} seed {args.seed} for {loaded.run.train.episodes} episodes "
          f"in {result.seconds:.1f}s -> {out}")
    return EXIT_OK


EVAL_HEADER = ("episode", "day", "seed", "return", "terminal", "charging_cost", "target_cost",
               "range_anxiety_cost")


def evaluate_run(bundle, loaded: Loaded, n: int, out: Path, traces: bool = False):
    _, test_env = _envs(loaded)
    tc = loaded.run.train
    days, seeds = eval_protocol(n, range(loaded.test_prices.n_days))
    summ = evaluate(bundle, test_env, days, seeds, trace=traces, kappa=tc.kappa, kappa_prime=tc.kappa_prime)
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_HEADER)
        for i, (d, s, e) in enumerate(zip(days, seeds, summ.episodes)):
            w.writerow([i, d, s, f"{e.ret:.8f}", int(e.terminal), f"{-e.charging_cost:.8f}",
                        f"{e.target_penalty:.8f}", f"{e.range_anxiety:.8f}"])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "episodes", "mean_return", "stderr", "terminals"])
        w.writerow([bundle.mode, n, f"{summ.mean:.8f}", f"{summ.stderr:.8f}", summ.terminals])
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for i, e in enumerate(summ.episodes):
            write_trace(tdir / f"episode_{i:03d}.csv", e.trace)
    return summ


def cmd_evaluate(args) -> int:
    n = 100 if args.episodes is None else args.episodes
    if n <= 0:
        raise UsageError("--episodes must be positive")
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise DataError(f"checkpoint {ck} not found")
    loaded = _load(args.config)
    try:
        bundle = PolicyBundle.load(ck, loaded.run.env, loaded.run.train)
    except (ArchitectureMismatch, KeyError, ValueError) as exc:
        raise DataError(f"cannot load {ck}: {exc}") from None
    out = _out_dir(args.out, f"eval-{ck.parent.name or ck.stem}")
    write_manifest(out, "evaluate", loaded, [], {"checkpoint": str(ck.resolve()), "checkpoint_sha256": _sha256(ck),
                                                 "episodes": n})
    summ = evaluate_run(bundle, loaded, n, out, args.traces)
    print(f"{bundle.mode}: mean return {summ.mean:.4f} +- {summ.stderr:.4f} over {n} episodes, "
          f"{summ.terminals} terminal")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    path = Path(args.instance) if args.instance else Path(data_path("instance_a.ini"))
    if not path.exists():
        raise DataError(f"instance file {path} not found")
    try:
        inst = load_instance(path)
    except InstanceError as exc:
        raise DataError(str(exc)) from None
    out = _out_dir(args.out, f"oracle-{path.stem}")
    report = check_option_equivalence(inst)
    report.write(out / "oracle_report.csv")
    print(report.line())
    if report.verdict == FAIL:
        return EXIT_VERDICT_FAIL
    if report.verdict == INCONCLUSIVE:
        return EXIT_VERDICT_INCONCLUSIVE
    return EXIT_OK


RUNS_HEADER = ("mode", "seed", "bus", "bus_offset_minutes", "status", "test_mean", "test_stderr", "terminals",
               "episodes_to_converge", "train_seconds")


def cmd_compare(args) -> int:
    modes = [_mode(m.strip()) for m in (args.modes or ",".join(MODES)).split(",") if m.strip()]
    seeds = _int_list(args.seeds or "0,1,2", "--seeds")
    if not modes or not seeds:
        raise UsageError("need at least one mode and one seed")
    if len(seeds) > len(TABLE_LABELS):
        raise UsageError(f"at most {len(TABLE_LABELS)} seeds")
    n_test = args.test_episodes
    root = _out_dir(args.out, "compare")
    base = _load(args.config, args.episodes)
    write_manifest(root, "compare", base, seeds, {"modes": modes, "bus_spacing_minutes": BUS_SPACING_MINUTES})
    rows, failed = [], False
    for mode in modes:
        for i, seed in enumerate(seeds):
            offset = BUS_SPACING_MINUTES * i
            loaded = _load(args.config, args.episodes, bus_offset=offset)
            out = root / mode / f"seed{seed}"
            out.mkdir(parents=True, exist_ok=True)
            row = {"mode": mode, "seed": seed, "bus": f"EB {TABLE_LABELS[i]}", "bus_offset_minutes": offset}
            try:
                res = train_run(loaded, mode, seed, out)
                summ = evaluate_run(res.bundle, loaded, n_test, out)
                row.update(status="ok", test_mean=summ.mean, test_stderr=summ.stderr, terminals=summ.terminals,
                           episodes_to_converge=episodes_to_converge(res.log), train_seconds=res.seconds)
            except TrainingFault as exc:
                failed = True
                row.update(status=f"training fault: {exc}")
            log.info("%s seed %d: %s", mode, seed, row.get("test_mean", row["status"]))
            rows.append(row)
    with open(root / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUNS_HEADER, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8f}" if isinstance(v, float) else v) for k, v in r.items()})
    write_table(root / "table.csv", rows, modes, len(seeds))
    for r in rows:
        result = f"{r['test_mean']:.4f} ({r['terminals']} terminal)" if r["status"] == "ok" else r["status"]
        print(f"{r['mode']:14s} seed {r['seed']:<3d} {result}")
    return EXIT_TRAINING if failed else EXIT_OK


def write_table(path, rows, modes, n_bus):
    """Per-bus mean test return with the best (Max) and the average across buses, one row per mode."""
    buses = [f"EB {TABLE_LABELS[i]}" for i in range(n_bus)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", *buses, "Max", "Average"])
        for mode in modes:
            vals = {r["bus"]: r["test_mean"] for r in rows if r["mode"] == mode and r["status"] == "ok"}
            cells = [f"{vals[b]:.4f}" if b in vals else "" for b in buses]
            got = np.array(list(vals.values()), float)
            summary = [f"{got.max():.4f}", f"{got.mean():.4f}"] if got.size == n_bus else ["", ""]
            w.writerow([mode, *cells, *summary])


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebcharge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one learner")
    t.add_argument("--config")
    t.add_argument("--mode", default="hddqn_her", help=", ".join(MODES))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--episodes", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="greedy test episodes of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--config")
    e.add_argument("--episodes", type=int)
    e.add_argument("--traces", action="store_true", help="write one trace file per episode")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle-check", help="exact flat vs hierarchical optimum on a tabular instance")
    o.add_argument("--instance", help=f"instance file (default: bundled instance_a; {COARSE} is also shipped)")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle_check)

    c = sub.add_parser("compare", help="train and test several modes over several seeds (one bus per seed)")
    c.add_argument("--config")
    c.add_argument("--modes", help="comma-separated; default all")
    c.add_argument("--seeds", help="comma-separated; default 0,1,2")
    c.add_argument("--episodes", type=int)
    c.add_argument("--test-episodes", type=int, default=100)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ebcharge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError) as exc:
        print(f"ebcharge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFault as exc:
        print(f"ebcharge: training fault: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
