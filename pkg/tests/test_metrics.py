import csv
import io
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fewfed.metrics import (
    EXCLUDED,
    TaskMetric,
    apir,
    compare,
    evaluate,
    outcome,
    pir,
    score,
    token_accuracy,
    win_lose_tie,
)
from fewfed.model import ModelParams
from fewfed.tasks import EOS, FewShotSplit, Example, generate_task_suite

unit = st.floats(0, 1, allow_nan=False)


def test_pir_values():
    assert pir(0.6, 0.5) == pytest.approx(0.2)
    assert pir(0.5, 0.5) == 0.0
    assert pir(0.3, 0.0) == EXCLUDED
    assert pir(0.0, 0.4) == -1.0


@given(unit, st.floats(1e-3, 1))
def test_pir_sign_matches_outcome(new, base):
    p = pir(new, base)
    o = outcome(new, base, 0.0)
    assert (p > 0) == (o == "win") and (p < 0) == (o == "lose")


def test_apir_two_stage_mean():
    assert apir({"c1": [0.2, -0.1, 0.2], "c2": [0.1]}) == pytest.approx(0.1)
    # flat mean would be 0.1 as well here; this one separates them
    assert apir({0: [0.3, 0.3, 0.3], 1: [-0.1]}) == pytest.approx(0.1)
    assert apir({0: [0.305]}) == pytest.approx(0.305)
    assert apir({0: [EXCLUDED, 0.4], 1: [EXCLUDED]}) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        apir({0: [EXCLUDED]})


@given(st.lists(st.lists(st.floats(-1, 5, allow_nan=False), min_size=1, max_size=6), min_size=1, max_size=5),
       st.randoms())
def test_apir_permutation_invariant(groups, rnd):
    a = apir(dict(enumerate(groups)))
    shuffled = [rnd.sample(g, len(g)) for g in groups]
    rnd.shuffle(shuffled)
    assert apir(dict(enumerate(shuffled))) == pytest.approx(a, rel=1e-12, abs=1e-15)


def test_win_lose_tie_counts_for_118_tasks():
    # a 72/7/39 split over 118 tasks; any split summing to 118 works the same way
    rnd = random.Random(0)
    base, new = [], []
    for i, kind in enumerate(["win"] * 72 + ["lose"] * 7 + ["tie"] * 39):
        b = rnd.uniform(0.2, 0.8)
        n = b + 0.1 if kind == "win" else b - 0.1 if kind == "lose" else b
        base.append(TaskMetric(f"t{i}", "token_accuracy", b))
        new.append(TaskMetric(f"t{i}", "token_accuracy", n))
    assert win_lose_tie(new, base) == (72, 7, 39)


@given(st.lists(st.tuples(unit, unit), min_size=1, max_size=20))
def test_win_lose_tie_total(pairs):
    new = [TaskMetric(f"t{i}", "token_accuracy", a) for i, (a, _) in enumerate(pairs)]
    base = [TaskMetric(f"t{i}", "token_accuracy", b) for i, (_, b) in enumerate(pairs)]
    assert sum(win_lose_tie(new, base)) == len(pairs)
    w, l, t = win_lose_tie(base, base)
    assert (w, l) == (0, 0) and t == len(pairs)


def test_tie_tolerance():
    assert outcome(0.5 + 1e-12, 0.5) == "tie"
    assert outcome(0.5 + 1e-6, 0.5) == "win"


def test_mismatched_task_sets_rejected():
    with pytest.raises(ValueError):
        win_lose_tie([TaskMetric("a", "token_accuracy", 0.1)], [TaskMetric("b", "token_accuracy", 0.1)])


def test_metric_value_range():
    with pytest.raises(ValueError):
        TaskMetric("a", "token_accuracy", 1.5)


def test_scores():
    assert token_accuracy([5, 6, 9], [5, 6, 7]) == pytest.approx(2 / 3)
    assert token_accuracy([5], [5, 6]) == 0.5
    assert score("token_accuracy", [5, 6, EOS, 7], [5, 6]) == 1.0
    assert score("sequence_exact_match", [8, EOS], [8]) == 1.0
    assert score("sequence_exact_match", [8, 9], [8]) == 0.0


def test_evaluate_with_zero_model_is_zero():
    task = generate_task_suite(1, {"other": 1.0}, seed=0)[0]
    a = task.symbol_offset
    split = FewShotSplit(task.task_id, (), (Example(task.task_id, (a, a + 1), tuple(task.apply([a, a + 1]))),), 0)
    m = evaluate(ModelParams.zeros(task.vocab_size, 4), task, split)
    # all logits tie, so greedy picks token 0 every step: never a symbol
    assert m.value == 0.0 and m.kind == "token_accuracy"


def test_compare_report_and_csv():
    suite = generate_task_suite(3, {"classification": 1.0}, seed=0)
    base = [TaskMetric(t.task_id, "sequence_exact_match", v) for t, v in zip(suite, [0.5, 0.0, 0.25])]
    new = [TaskMetric(t.task_id, "sequence_exact_match", v) for t, v in zip(suite, [0.75, 0.5, 0.25])]
    rep = compare(new, base, suite, {suite[0].task_id: 0, suite[1].task_id: 0, suite[2].task_id: 1})
    assert (rep.win, rep.lose, rep.tie) == (2, 0, 1)
    assert rep.excluded_tasks == [suite[1].task_id]
    assert rep.apir == pytest.approx((0.5 + 0.0) / 2)
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [r["pir"] for r in rows] == ["0.5", EXCLUDED, "0.0"]
    assert list(rows[0]) == ["task_id", "category", "client", "m_base", "m_new", "pir", "outcome"]
    assert np.isclose(rep.to_dict()["apir"], rep.apir)
