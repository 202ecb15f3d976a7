"""Task evaluation and the relative-improvement comparison against a base run."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import ModelParams, greedy_decode_batch
from .tasks import EOS, FewShotSplit, TaskSpec, format_prompt

EXCLUDED = "excluded"
DEFAULT_TIE_EPS = 1e-9


@dataclass(frozen=True)
class TaskMetric:
    task_id: str
    kind: str  # "sequence_exact_match" | "token_accuracy"
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")


def metric_kind(task: TaskSpec) -> str:
    return "sequence_exact_match" if task.is_classification else "token_accuracy"


def strip_eos(tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    return tokens[: tokens.index(EOS)] if EOS in tokens else tokens


def token_accuracy(pred: Sequence[int], gold: Sequence[int]) -> float:
    hits = sum(1 for p, g in zip(pred, gold) if p == g)
    return hits / len(gold)


def score(kind: str, pred: Sequence[int], gold: Sequence[int]) -> float:
    pred = strip_eos(pred)
    if kind == "sequence_exact_match":
        return float(list(pred) == list(gold))
    return token_accuracy(pred, gold)


def evaluate(params: ModelParams, task: TaskSpec, split: FewShotSplit) -> TaskMetric:
    if not split.test:
        raise ValueError(f"task {split.task_id} has an empty test set")
    kind = metric_kind(task)
    decoded = greedy_decode_batch(params, [format_prompt(task, ex.input) for ex in split.test], task.max_decode_len)
    values = [score(kind, tokens, ex.target) for (tokens, _), ex in zip(decoded, split.test)]
    return TaskMetric(task.task_id, kind, float(np.mean(values)))


def pir(m_new: float, m_base: float):
    """Relative improvement over the base metric; ``EXCLUDED`` when the base is 0."""
    if m_base == 0:
        return EXCLUDED
    return (m_new - m_base) / m_base


def apir(pirs_by_client: Mapping) -> float:
    """Mean over clients of each client's mean included PIR."""
    client_means = []
    for key in sorted(pirs_by_client):
        values = [p for p in pirs_by_client[key] if p != EXCLUDED]
        if values:
            client_means.append(float(np.mean(values)))
    if not client_means:
        raise ValueError("no included PIR values")
    return float(np.mean(client_means))


def outcome(m_new: float, m_base: float, tie_eps: float = DEFAULT_TIE_EPS) -> str:
    diff = m_new - m_base
    if diff > tie_eps:
        return "win"
    if diff < -tie_eps:
        return "lose"
    return "tie"


def win_lose_tie(new: Sequence[TaskMetric], base: Sequence[TaskMetric], tie_eps: float = DEFAULT_TIE_EPS) -> tuple[int, int, int]:
    new_map = {m.task_id: m.value for m in new}
    base_map = {m.task_id: m.value for m in base}
    if set(new_map) != set(base_map) or len(new_map) != len(new):
        raise ValueError("new and base metrics cover different task sets")
    counts = {"win": 0, "lose": 0, "tie": 0}
    for task_id, b in base_map.items():
        counts[outcome(new_map[task_id], b, tie_eps)] += 1
    return counts["win"], counts["lose"], counts["tie"]


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)  # dicts, one per task
    apir: float | None = None
    win: int = 0
    lose: int = 0
    tie: int = 0
    excluded_tasks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "apir": self.apir,
            "win": self.win,
            "lose": self.lose,
            "tie": self.tie,
            "excluded_tasks": list(self.excluded_tasks),
            "tasks": list(self.rows),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task_id", "category", "client", "m_base", "m_new", "pir", "outcome"])
        for r in self.rows:
            p = r["pir"]
            writer.writerow([r["task_id"], r["category"], r["client"], repr(r["m_base"]), repr(r["m_new"]),
                             p if p == EXCLUDED else repr(p), r["outcome"]])
        return buf.getvalue()


def compare(
    new: Sequence[TaskMetric],
    base: Sequence[TaskMetric],
    suite: Sequence[TaskSpec],
    client_of: Mapping[str, int],
    tie_eps: float = DEFAULT_TIE_EPS,
) -> ComparisonReport:
    """Per-task PIR, two-stage APIR and win/lose/tie of ``new`` against ``base``."""
    w, l, t = win_lose_tie(new, base, tie_eps)
    new_map = {m.task_id: m.value for m in new}
    base_map = {m.task_id: m.value for m in base}
    report = ComparisonReport(win=w, lose=l, tie=t)
    by_client: dict = {}
    for task in suite:
        mb, mn = base_map[task.task_id], new_map[task.task_id]
        p = pir(mn, mb)
        if p == EXCLUDED:
            report.excluded_tasks.append(task.task_id)
        by_client.setdefault(client_of[task.task_id], []).append(p)
        report.rows.append({
            "task_id": task.task_id,
            "category": task.category,
            "client": client_of[task.task_id],
            "m_base": mb,
            "m_new": mn,
            "pir": p,
            "outcome": outcome(mn, mb, tie_eps),
        })
    try:
        report.apir = apir(by_client)
    except ValueError:
        report.apir = None
    return report
