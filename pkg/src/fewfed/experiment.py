"""Experiment drivers: multi-seed runs, the ablation grid, the client-count sweep
and report/trajectory emission.

Everything written to ``report.json`` and the CSV tables is a pure function of
the config.  Wall-clock timings go to ``timing.json`` so that reports stay
byte-identical across executions.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, RoundFailure
from .federation import build_splits, communication_summary, run_training
from .metrics import TaskMetric, compare
from .seeding import child_seed
from .tasks import assign_clients, generate_task_suite, write_examples, write_manifest

log = logging.getLogger(__name__)

REPORT_FORMAT = "fewfed-report/1"
ABLATION_ORDER = ("fedavg_da", "fedavg_da_pseudo_weight", "fedavg_da_dynamic_agg", "fewfedweight")
BASE_STRATEGY = "data_silo"


@dataclass(frozen=True)
class Benchmark:
    suite: list
    assignment: object
    splits: dict
    manifest_hash: str


def build_benchmark(config: RunConfig, seed: int) -> Benchmark:
    """Suite, client assignment and few-shot splits for one seed; independent of strategy."""
    suite = generate_task_suite(config.num_tasks, config.category_mix, child_seed(seed, "suite"),
                                num_symbols=config.num_symbols, families=config.families)
    assignment = assign_clients(suite, config.num_clients, child_seed(seed, "assign"))
    splits = build_splits(suite, seed)
    doc = json.dumps({"tasks": [t.to_dict() for t in suite], "mapping": assignment.mapping}, sort_keys=True)
    return Benchmark(suite, assignment, splits, hashlib.sha256(doc.encode()).hexdigest())


def _metrics_rows(result, seed, bench):
    return [{"seed": seed, "strategy": result.strategy, "task_id": m.task_id,
             "client": bench.assignment.mapping[m.task_id], "kind": m.kind, "value": m.value}
            for m in result.metrics]


def _run_seed(config, strategy, seed, out, base_cache, timing):
    bench = build_benchmark(config, seed)
    train = config.train_config()
    ckpt_root = Path(out) / "checkpoints" if out is not None else None

    def run(name):
        ckpt = ckpt_root / f"{name}-seed{seed}" if ckpt_root is not None else None
        timer = {}
        result = run_training(bench.suite, bench.assignment, name, train, seed, bench.splits, ckpt, timer)
        timing.setdefault(name, {}).setdefault(str(seed), timer)
        return result

    key = (seed, bench.manifest_hash)
    if key not in base_cache:
        base_cache[key] = run(BASE_STRATEGY)
    base = base_cache[key]
    result = base if strategy == BASE_STRATEGY else run(strategy)
    comparison = compare(result.metrics, base.metrics, bench.suite, bench.assignment.mapping, config.tie_eps)
    return bench, base, result, comparison


def _strategy_block(config, strategy, out, base_cache, timing):
    seeds, metrics, comparisons, rounds, trajectories, errors = [], [], [], [], {}, {}
    comm = None
    hashes = {}
    for seed in config.seeds:
        try:
            bench, base, result, comparison = _run_seed(config, strategy, seed, out, base_cache, timing)
        except (RoundFailure, FloatingPointError, RuntimeError) as exc:
            log.error("strategy %s seed %d failed: %s", strategy, seed, exc)
            errors[str(seed)] = str(exc)
            continue
        hashes[str(seed)] = bench.manifest_hash
        seeds.append({"seed": seed, "apir": comparison.apir, "win": comparison.win, "lose": comparison.lose,
                      "tie": comparison.tie, "excluded_tasks": comparison.excluded_tasks})
        metrics.extend(_metrics_rows(result, seed, bench))
        if strategy != BASE_STRATEGY:
            metrics.extend(_metrics_rows(base, seed, bench))
        comparisons.extend({"seed": seed, **row} for row in comparison.rows)
        rounds.extend({"seed": seed, **entry.to_dict()} for entry in result.round_logs)
        trajectories[str(seed)] = result.trajectory
        if comm is None:
            comm = communication_summary(result.round_logs)["total"]
    apirs = [s["apir"] for s in seeds if s["apir"] is not None]
    summary = {
        "strategy": strategy,
        "apir": float(np.mean(apirs)) if apirs else None,
        "win": sum(s["win"] for s in seeds),
        "lose": sum(s["lose"] for s in seeds),
        "tie": sum(s["tie"] for s in seeds),
    }
    return {
        "summary": summary,
        "seeds": seeds,
        "manifest_hashes": hashes,
        "communication_first_seed": comm,
        "trajectories": trajectories,
        "errors": errors,
        "complete": not errors,
        "_metrics": metrics,
        "_comparisons": comparisons,
        "_rounds": rounds,
    }


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _write_outputs(out, report, blocks, timing):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, comparisons, rounds = [], [], []
    seen = set()
    for name, block in blocks.items():
        for row in block.pop("_metrics"):
            key = (row["seed"], row["strategy"], row["task_id"])
            if key not in seen:
                seen.add(key)
                metrics.append(row)
        comparisons.extend({"strategy": name, **r} for r in block.pop("_comparisons"))
        rounds.extend(block.pop("_rounds"))
    (out / "metrics.csv").write_text(_csv(metrics, ["seed", "strategy", "task_id", "client", "kind", "value"]))
    (out / "comparison.csv").write_text(_csv(
        comparisons, ["strategy", "seed", "task_id", "category", "client", "m_base", "m_new", "pir", "outcome"]))
    (out / "summary.csv").write_text(_csv(report["table"], ["strategy", "apir", "win", "lose", "tie"]))
    with open(out / "rounds.jsonl", "w") as fh:
        for entry in rounds:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(normalize_timing(timing), indent=2, sort_keys=True) + "\n")


def normalize_timing(timing: dict) -> dict:
    """Seconds per phase, plus the same figures in units of the fedavg train phase when available."""
    totals = {name: {phase: float(sum(t.get(phase, 0.0) for t in per_seed.values()))
                     for phase in ("generate", "train")} for name, per_seed in timing.items()}
    doc = {"seconds": totals}
    ref = totals.get("fedavg", {}).get("train")
    if ref:
        doc["fedavg_train_units"] = {n: {p: v / ref for p, v in ph.items()} for n, ph in totals.items()}
    return doc


def _report(config, strategies, out, kind, extra=None):
    base_cache, timing = {}, {}
    blocks = {s: _strategy_block(config, s, out, base_cache, timing) for s in strategies}
    report = {
        "format": REPORT_FORMAT,
        "kind": kind,
        "config": config.to_dict(),
        "base_strategy": BASE_STRATEGY,
        "table": [b["summary"] for b in blocks.values()],
        "complete": all(b["complete"] for b in blocks.values()),
        **(extra or {}),
    }
    if out is not None:
        _write_outputs(out, report, blocks, timing)
        report["strategies"] = blocks
        (Path(out) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    else:
        for b in blocks.values():
            for k in ("_metrics", "_comparisons", "_rounds"):
                b.pop(k)
        report["strategies"] = blocks
    return report


def run_experiment(config: RunConfig, out=None) -> dict:
    """Run ``config.strategy`` and the data_silo base on every seed and compare them."""
    return _report(config, [config.strategy], out, "run")


def run_ablation(config: RunConfig, out=None) -> dict:
    """The four data-augmentation variants on shared data, in table order."""
    return _report(config, list(ABLATION_ORDER), out, "ablation")


def run_client_sweep(config: RunConfig, client_counts, out=None) -> dict:
    """fewfedweight against the base for each client count, five tasks per client."""
    counts = list(client_counts)
    if not counts or any(int(k) < 1 for k in counts):
        raise ConfigurationError("client counts must be positive integers")
    rows = []
    for k in counts:
        cfg = replace(config, num_clients=int(k), tasks_per_client=5, total_tasks=None, strategy="fewfedweight")
        sub = None if out is None else Path(out) / f"clients{k}"
        rep = run_experiment(cfg, sub)
        rows.append({"num_clients": int(k), "num_tasks": cfg.num_tasks, **rep["table"][0]})
    report = {"format": REPORT_FORMAT, "kind": "client_sweep", "config": config.to_dict(), "rows": rows}
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (Path(out) / "sweep.csv").write_text(
            _csv(rows, ["num_clients", "num_tasks", "strategy", "apir", "win", "lose", "tie"]))
    return report


def emit_trajectories(report: dict, out_path=None) -> tuple[list, str | None]:
    """Flatten per-round aggregation weights into rows (strategy, seed, round, w_0..w_K-1).

    Returns the rows and a note; the note explains an empty table.
    """
    rows, width = [], 0
    for name, block in report.get("strategies", {}).items():
        for seed, traj in block.get("trajectories", {}).items():
            for t, weights in enumerate(traj):
                rows.append({"strategy": name, "seed": int(seed), "round": t, **{f"w{i}": w for i, w in enumerate(weights)}})
                width = max(width, len(weights))
    note = None if rows else "no aggregation history: the run never aggregated (e.g. data_silo)"
    if out_path is not None:
        text = _csv(rows, ["strategy", "seed", "round", *[f"w{i}" for i in range(width)]])
        if note:
            text = f"# {note}\n" + text
        Path(out_path).write_text(text)
    return rows, note


def generate_dataset(config: RunConfig, seed: int, out) -> Benchmark:
    """Write the suite manifest and per-split example files for one seed."""
    bench = build_benchmark(config, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(bench.suite, out / "suite.json", bench.assignment)
    for part in ("train", "test"):
        examples = [ex for t in bench.suite for ex in getattr(bench.splits[t.task_id], part)]
        write_examples(examples, bench.suite, out / f"{part}.tsv")
    return bench


def recompute_report(run_dir, tie_eps: float | None = None) -> dict:
    """Rebuild the comparison table from a run directory's stored metrics."""
    run_dir = Path(run_dir)
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    report = json.loads((run_dir / "report.json").read_text())
    eps = report["config"]["tie_eps"] if tie_eps is None else tie_eps
    by = {}
    for r in rows:
        by.setdefault((int(r["seed"]), r["strategy"]), []).append(r)
    table = []
    for name in [row["strategy"] for row in report["table"]]:
        seeds = sorted({s for s, n in by if n == name})
        apirs, w, l, t = [], 0, 0, 0
        for seed in seeds:
            new = by[(seed, name)]
            base = by[(seed, BASE_STRATEGY)]
            client_of = {r["task_id"]: int(r["client"]) for r in new}
            comp = compare([TaskMetric(r["task_id"], r["kind"], float(r["value"])) for r in new],
                           [TaskMetric(r["task_id"], r["kind"], float(r["value"])) for r in base],
                           [SimpleNamespace(task_id=r["task_id"], category="") for r in new], client_of, eps)
            if comp.apir is not None:
                apirs.append(comp.apir)
            w, l, t = w + comp.win, l + comp.lose, t + comp.tie
        table.append({"strategy": name, "apir": float(np.mean(apirs)) if apirs else None, "win": w, "lose": l, "tie": t})
    return {"format": REPORT_FORMAT, "kind": "recomputed", "tie_eps": eps, "table": table}


__all__ = [
    "ABLATION_ORDER", "Benchmark", "build_benchmark", "emit_trajectories", "generate_dataset",
    "normalize_timing", "recompute_report", "run_ablation", "run_client_sweep", "run_experiment",
]
