"""Command-line front-end.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .errors import ConfigurationError
from .experiment import (
    emit_trajectories,
    generate_dataset,
    recompute_report,
    run_ablation,
    run_client_sweep,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _common(p: argparse.ArgumentParser, strategy=True) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="master seed; overrides FEWFED_SEED")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--switch-round", type=int, dest="switch_round",
                   help="aggregate by data size before this round, by loss afterwards")
    if strategy:
        p.add_argument("--strategy", help="strategy name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewfed", description="Few-shot federated multi-task simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="write the suite manifest and example files")
    _common(p, strategy=False)

    p = sub.add_parser("run", help="run one strategy against the data_silo base")
    _common(p)

    p = sub.add_parser("ablate", help="run the four data-augmentation variants")
    _common(p, strategy=False)

    p = sub.add_parser("sweep-clients", help="fewfedweight at several client counts")
    _common(p, strategy=False)
    p.add_argument("--counts", default="2,4,8,12", help="comma-separated client counts")

    p = sub.add_parser("report", help="recompute comparisons from a stored run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--tie-eps", type=float, dest="tie_eps")
    p.add_argument("--trajectories", type=Path, help="also write the weight trajectory table here")
    return parser


def _config(args):
    overrides = {"seed": args.seed, "switch_round": getattr(args, "switch_round", None),
                 "strategy": getattr(args, "strategy", None)}
    if args.out is not None:
        overrides["out"] = str(args.out)
    return load_config(args.config, **overrides)


def _summary(report) -> str:
    lines = []
    for row in report.get("table", report.get("rows", [])):
        apir = "n/a" if row.get("apir") is None else f"{row['apir']:+.4f}"
        prefix = f"K={row['num_clients']:<3d} " if "num_clients" in row else ""
        lines.append(f"{prefix}{row['strategy']:<26s} APIR {apir}  W/L/T {row['win']}/{row['lose']}/{row['tie']}")
    return "\n".join(lines)


def _dispatch(args) -> int:
    if args.command == "report":
        rep = recompute_report(args.run_dir, args.tie_eps)
        print(_summary(rep))
        if args.trajectories is not None:
            stored = json.loads((args.run_dir / "report.json").read_text())
            _, note = emit_trajectories(stored, args.trajectories)
            if note:
                print(note)
        return EXIT_OK

    cfg = _config(args)
    out = Path(cfg.out)
    if args.command == "gen-tasks":
        for seed in cfg.seeds:
            bench = generate_dataset(cfg, seed, out / f"seed{seed}")
            print(f"seed {seed}: {len(bench.suite)} tasks, manifest {bench.manifest_hash[:12]}")
        return EXIT_OK
    if args.command == "run":
        rep = run_experiment(cfg, out)
    elif args.command == "ablate":
        rep = run_ablation(cfg, out)
    else:
        try:
            counts = [int(c) for c in args.counts.split(",") if c.strip()]
        except ValueError:
            raise ConfigurationError(f"--counts must be comma-separated integers, got {args.counts!r}") from None
        rep = run_client_sweep(replace(cfg, strategy="fewfedweight"), counts, out)
    if "strategies" in rep:
        emit_trajectories(rep, out / "trajectories.csv")
    print(_summary(rep))
    if not rep.get("complete", True):
        print("some seeds failed; report marked incomplete", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors are configuration errors
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001  every other failure is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
