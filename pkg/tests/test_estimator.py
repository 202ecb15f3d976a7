import numpy as np
import pytest
from sklearn.base import clone

from fewfed.estimator import EnergyWeighter, FederatedTextToText, check_logit_sequences, check_token_sequences
from fewfed.tasks import generate_task_suite


def test_check_token_sequences():
    assert check_token_sequences([[1, 2], np.array([3])]) == [[1, 2], [3]]
    assert check_token_sequences(np.array([[1.0, 2.0]])) == [[1, 2]]
    for bad in ([[1.5]], [[-1]], [[[1]]], "abc", [[]]):
        with pytest.raises(ValueError):
            check_token_sequences(bad)
    with pytest.raises(ValueError):
        check_token_sequences([[9]], vocab_size=5)


def test_check_logit_sequences():
    with pytest.raises(ValueError):
        check_logit_sequences([np.zeros(3)])
    with pytest.raises(ValueError):
        check_logit_sequences([np.array([[np.nan, 1.0]])])


def test_energy_weighter_params_and_transform():
    w = EnergyWeighter(top_k=3)
    assert w.get_params() == {"temperature": 1.0, "top_k": 3, "weight_floor": 1e-6}
    assert clone(w).get_params() == w.get_params()
    rng = np.random.default_rng(0)
    blocks = [rng.normal(size=(4, 10)), rng.normal(size=(2, 10))]
    out = w.fit_transform(blocks)
    assert [len(o) for o in out] == [4, 2]
    assert all(abs(o.sum() - 1) < 1e-12 for o in out)
    with pytest.raises(ValueError):
        w.transform([rng.normal(size=(2, 7))])


def test_energy_weighter_rejects_bad_params():
    with pytest.raises(Exception):
        EnergyWeighter(top_k=0).fit([np.zeros((1, 3))])


def test_federated_estimator_fit_predict_score():
    suite = generate_task_suite(4, {"classification": 0.5, "other": 0.5}, seed=1)
    est = FederatedTextToText(strategy="fedavg", num_clients=2, rounds=2, d=8, lr=0.1)
    assert est.get_params()["strategy"] == "fedavg"
    est.fit(suite)
    split = est.splits_[suite[0].task_id]
    X = [ex.input for ex in split.test]
    y = [ex.target for ex in split.test]
    pred = est.predict(X, [suite[0].task_id] * len(X))
    assert len(pred) == len(X) and all(2 not in p for p in pred)
    s = est.score(X, y, [suite[0].task_id] * len(X))
    assert s == pytest.approx(est.metrics_[suite[0].task_id])
    with pytest.raises(ValueError):
        est.predict(X, ["zzz"] * len(X))


def test_federated_estimator_validation():
    with pytest.raises(ValueError):
        FederatedTextToText(strategy="nope").fit(generate_task_suite(2, None, seed=0))
    with pytest.raises(ValueError):
        FederatedTextToText().fit([1, 2])
