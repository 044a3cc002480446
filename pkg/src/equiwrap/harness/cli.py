"""Command-line entry point.

    equiwrap <subcommand> --config cfg.json [--set k=v ...] [--out DIR]
                          [--parallel-seeds N] [--quiet]

Subcommands: pretrain, eval, finetune (vision configs); rl-train, rl-eval
(rl configs); scan-run (scan); generate (fairness); universality; bench.
Every run writes metrics.csv (deterministic per-seed values) and
summary.json into the output directory; bench additionally writes bench.csv
with wall-clock medians.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, config_hash, load_config
from . import experiments
from .bench import bench_run

COMMANDS = ("pretrain", "eval", "finetune", "rl-train", "rl-eval",
            "scan-run", "generate", "universality", "bench")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equiwrap",
        description="group-equivariant wrapper toolkit experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override a config key (repeatable)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--parallel-seeds", type=int, default=1, metavar="N")
        p.add_argument("--quiet", action="store_true")
    return parser


def _bench_main(cfg, out: Path, quiet: bool) -> dict:
    t0 = time.perf_counter()
    rows_by_seed = []
    for seed in cfg.seeds:
        result = bench_run(cfg, seed=seed)
        rows_by_seed.append((seed, result))
    # wall-clock table (not part of the determinism contract)
    with (out / "bench.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "target", "median_s", "iqr_s"])
        for seed, result in rows_by_seed:
            for name, row in result["wrappers"].items():
                w.writerow([seed, name, row["median_s"], row["iqr_s"]])
            for name, row in result["kernels"].items():
                w.writerow([seed, name, row["median_s"], row["iqr_s"]])
    # deterministic allocation estimates -> metrics.csv
    metric_rows = []
    for seed, result in rows_by_seed:
        row = {"seed": seed}
        for name, vals in result["wrappers"].items():
            row[f"alloc_bytes_{name}"] = vals["alloc_bytes"]
        metric_rows.append(row)
    experiments.write_metrics_csv(metric_rows, out / "metrics.csv")
    extra = {"bench": {str(seed): res["wrappers"] for seed, res in rows_by_seed}}
    doc = experiments.write_summary(cfg, "bench", metric_rows, out,
                                    time.perf_counter() - t0, extra=extra)
    if not quiet:
        for seed, result in rows_by_seed:
            for name, row in result["wrappers"].items():
                print(f"seed {seed} {name:9s} median {row['median_s']*1e3:8.3f} ms"
                      f"  iqr {row['iqr_s']*1e3:6.3f} ms")
    return doc


_KIND_FOR = {"pretrain": "vision", "eval": "vision", "finetune": "vision",
             "rl-train": "rl", "rl-eval": "rl", "scan-run": "scan",
             "generate": "fairness", "universality": "universality",
             "bench": "bench"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.set)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    want = _KIND_FOR[args.command]
    if cfg.kind != want:
        print(f"error: subcommand {args.command!r} needs a {want!r} config, "
              f"got {cfg.kind!r}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.get("out_dir")
               or f"runs/{cfg.kind}-{config_hash(cfg)[:8]}")
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "bench":
            doc = _bench_main(cfg, out, args.quiet)
        else:
            doc = experiments.run_command(cfg, args.command, out,
                                          parallel=args.parallel_seeds)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(json.dumps({"out": str(out), "config_hash": doc["config_hash"],
                          "aggregate": doc["aggregate"]}, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
