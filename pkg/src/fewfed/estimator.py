"""scikit-learn style wrappers around the energy weighting and the federated trainer."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .federation import STRATEGIES, TrainConfig, build_splits, run_training
from .metrics import metric_kind, score, strip_eos
from .model import greedy_decode_batch
from .tasks import TaskSpec, assign_clients, format_prompt
from .weighting import EnergyConfig, pseudo_token_weights


def check_token_sequences(X, vocab_size: int | None = None, allow_empty: bool = False) -> list[list[int]]:
    """Validate a ragged batch of token-id sequences and return it as lists of int."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = X.tolist()
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError("expected a sequence of token sequences")
    out = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq)
        if arr.ndim != 1:
            raise ValueError(f"sequence {i} is not one-dimensional")
        if arr.size == 0:
            if not allow_empty:
                raise ValueError(f"sequence {i} is empty")
            out.append([])
            continue
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.issubdtype(arr.dtype, np.floating) or not np.all(arr == np.round(arr)):
                raise ValueError(f"sequence {i} holds non-integer tokens")
        arr = arr.astype(np.int64)
        if arr.min() < 0 or (vocab_size is not None and arr.max() >= vocab_size):
            raise ValueError(f"sequence {i} has token ids outside [0, {vocab_size})")
        out.append(arr.tolist())
    return out


def check_logit_sequences(X, vocab_size: int | None = None) -> list[np.ndarray]:
    """Validate a ragged batch of [steps, vocab] logit matrices."""
    out = []
    for i, m in enumerate(X):
        m = np.asarray(m, dtype=float)
        if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
            raise ValueError(f"logit block {i} must be a non-empty 2-D array, got shape {m.shape}")
        if vocab_size is not None and m.shape[1] != vocab_size:
            raise ValueError(f"logit block {i} has vocabulary {m.shape[1]}, expected {vocab_size}")
        if not np.all(np.isfinite(m)):
            raise ValueError(f"logit block {i} is not finite")
        out.append(m)
    return out


class EnergyWeighter(TransformerMixin, BaseEstimator):
    """Map decode-time logit blocks to normalized per-token weights.

    ``transform`` returns one weight vector per block; each sums to 1.
    """

    def __init__(self, temperature=1.0, top_k=7, weight_floor=1e-6):
        self.temperature = temperature
        self.top_k = top_k
        self.weight_floor = weight_floor

    def _config(self) -> EnergyConfig:
        return EnergyConfig(self.temperature, self.top_k, self.weight_floor)

    def fit(self, X, y=None):
        self._config()  # validates the parameters
        blocks = check_logit_sequences(X)
        vocab = {b.shape[1] for b in blocks}
        if len(vocab) > 1:
            raise ValueError(f"logit blocks disagree on vocabulary size: {sorted(vocab)}")
        self.vocab_size_ = vocab.pop() if vocab else None
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_size_")
        cfg = self._config()
        return [pseudo_token_weights(b, cfg) for b in check_logit_sequences(X, self.vocab_size_)]


class FederatedTextToText(BaseEstimator):
    """Train one federated strategy on a task suite and decode with the owning client's model.

    ``fit`` takes the suite itself: each task brings its own few-shot split,
    drawn from ``random_state``.
    """

    def __init__(self, strategy="fewfedweight", num_clients=4, rounds=20, local_epochs=1, batch_size=8,
                 lr=0.05, d=32, init_scale=0.1, temperature=1.0, top_k=7, ditto_lambda=1.0, random_state=0):
        self.strategy = strategy
        self.num_clients = num_clients
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.d = d
        self.init_scale = init_scale
        self.temperature = temperature
        self.top_k = top_k
        self.ditto_lambda = ditto_lambda
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        cfg = TrainConfig(self.rounds, self.local_epochs, self.batch_size, self.lr, self.d, self.init_scale,
                          self.ditto_lambda, EnergyConfig(self.temperature, self.top_k))
        cfg.validate()
        return cfg

    def fit(self, X: Sequence[TaskSpec], y=None):
        tasks = list(X)
        if not tasks or not all(isinstance(t, TaskSpec) for t in tasks):
            raise ValueError("fit expects a non-empty list of TaskSpec")
        seed = int(self.random_state or 0)
        cfg = self._train_config()
        self.assignment_ = assign_clients(tasks, self.num_clients, seed)
        self.splits_ = build_splits(tasks, seed)
        result = run_training(tasks, self.assignment_, self.strategy, cfg, seed, self.splits_)
        self.tasks_ = {t.task_id: t for t in tasks}
        self.client_params_ = {c.client_id: c.params for c in result.clients}
        self.global_params_ = result.server.global_params
        self.metrics_ = {m.task_id: m.value for m in result.metrics}
        self.round_logs_ = result.round_logs
        return self

    def _params_for(self, task_id):
        owner = 0 if len(self.client_params_) == 1 else self.assignment_.mapping[task_id]
        return self.client_params_[owner]

    def predict(self, X, task_ids):
        """Greedy outputs (EOS stripped) for inputs ``X``, each tagged with its task id."""
        check_is_fitted(self, "client_params_")
        X = check_token_sequences(X)
        task_ids = list(task_ids)
        if len(task_ids) != len(X):
            raise ValueError("X and task_ids differ in length")
        unknown = sorted(set(task_ids) - set(self.tasks_))
        if unknown:
            raise ValueError(f"unknown task ids: {unknown}")
        out = [None] * len(X)
        for tid in dict.fromkeys(task_ids):
            task = self.tasks_[tid]
            idx = [i for i, t in enumerate(task_ids) if t == tid]
            decoded = greedy_decode_batch(self._params_for(tid), [format_prompt(task, X[i]) for i in idx],
                                          task.max_decode_len)
            for i, (tokens, _) in zip(idx, decoded):
                out[i] = strip_eos(tokens)
        return out

    def score(self, X, y, task_ids):
        """Mean per-example metric (exact match for classification, token accuracy otherwise)."""
        pred = self.predict(X, task_ids)
        y = check_token_sequences(y)
        return float(np.mean([score(metric_kind(self.tasks_[t]), p, g) for p, g, t in zip(pred, y, task_ids)]))
