"""Round-based federation: strategies, client updates, aggregation and accounting.

Parties hold immutable states.  A round builds new server/client states and
only returns them once every client has finished, so a failure anywhere
leaves the caller's states untouched.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, RoundFailure
from .metrics import TaskMetric, evaluate
from .model import GradientSet, ModelParams, backward_with_losses, example_losses, greedy_decode_batch, sgd_step
from .seeding import child_rng, child_seed
from .tasks import EOS, ClientAssignment, FewShotSplit, TaskSpec, format_prompt, sample_few_shot
from .weighting import EnergyConfig, meta_weight_step, pseudo_token_weights

log = logging.getLogger(__name__)

LOSS_SCALAR_BYTES = 8


@dataclass(frozen=True)
class StrategyFlags:
    federated: bool = True
    replace_local: bool = False
    augmentation: str | None = None  # None | "global" | "local"
    pseudo_weighting: str = "uniform"  # "uniform" | "energy" | "meta"
    aggregation: str = "data_size"  # "data_size" | "loss_proportional"
    proximal: bool = False
    pooled: bool = False


STRATEGIES = {
    "data_silo": StrategyFlags(federated=False),
    "data_silo_da": StrategyFlags(federated=False, augmentation="local"),
    "centralized": StrategyFlags(federated=False, pooled=True),
    "fedavg": StrategyFlags(replace_local=True),
    "fedavg_da": StrategyFlags(augmentation="global"),
    "fedavg_da_pseudo_weight": StrategyFlags(augmentation="global", pseudo_weighting="energy"),
    "fedavg_da_dynamic_agg": StrategyFlags(augmentation="global", aggregation="loss_proportional"),
    "fewfedweight": StrategyFlags(augmentation="global", pseudo_weighting="energy", aggregation="loss_proportional"),
    "ditto": StrategyFlags(proximal=True),
    "meta_weighting": StrategyFlags(augmentation="global", pseudo_weighting="meta"),
}


def strategy_flags(strategy: str) -> StrategyFlags:
    try:
        return STRATEGIES[strategy]
    except KeyError:
        raise ConfigurationError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}") from None


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 8
    lr: float = 0.05
    d: int = 32
    init_scale: float = 0.1
    ditto_lambda: float = 1.0
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    # rounds before this index aggregate by data size whatever the strategy says
    switch_round: int | None = None

    def validate(self) -> None:
        problems = []
        for name in ("rounds", "local_epochs"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("batch_size", "d"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not self.init_scale > 0:
            problems.append("init_scale must be > 0")
        if self.ditto_lambda < 0:
            problems.append("ditto_lambda must be >= 0")
        if self.switch_round is not None and self.switch_round < 0:
            problems.append("switch_round must be >= 0")
        if problems:
            raise ConfigurationError("; ".join(problems))


def aggregation_mode(strategy: str, round_index: int, config: TrainConfig) -> str:
    mode = strategy_flags(strategy).aggregation
    if config.switch_round is not None and round_index < config.switch_round:
        return "data_size"
    return mode


# --- states and messages ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClientState:
    client_id: int
    params: ModelParams
    tasks: tuple[TaskSpec, ...]
    splits: tuple[FewShotSplit, ...]
    last_loss: float = 0.0
    loss_pseudo: float = 0.0
    loss_annotated: float = 0.0

    @property
    def data_size(self) -> int:
        return sum(len(s.train) for s in self.splits)

    def annotated_records(self) -> list[tuple[list[int], list[int]]]:
        """``(prompt, target + EOS)`` for every training example."""
        by_id = {t.task_id: t for t in self.tasks}
        return [
            (format_prompt(by_id[s.task_id], ex.input), [*ex.target, EOS])
            for s in self.splits
            for ex in s.train
        ]


@dataclass(frozen=True, eq=False)
class ServerState:
    global_params: ModelParams
    round: int = 0
    aggregation: str = "data_size"
    history: tuple = ()


@dataclass(frozen=True)
class RoundMessage:
    direction: str  # "broadcast" | "upload"
    party: str
    payload_bytes: int
    carries_params: bool = True
    carries_loss: bool = False


@dataclass(frozen=True)
class PseudoRecord:
    prompt: list
    target: list
    step_logits: np.ndarray = field(repr=False)
    task_id: str = ""


# --- protocol operations -----------------------------------------------------------

def broadcast(server: ServerState, clients: Sequence[ClientState], strategy: str = "fewfedweight") -> list[RoundMessage]:
    if not strategy_flags(strategy).federated:
        return []
    size = server.global_params.nbytes
    return [RoundMessage("broadcast", f"client{c.client_id}", size) for c in clients]


def generate_pseudo_labels(global_params: ModelParams, client: ClientState, strategy: str = "fewfedweight") -> list[PseudoRecord]:
    """Greedy-decode one pseudo target for every training input of the client."""
    flags = strategy_flags(strategy)
    if flags.augmentation is None:
        return []
    generator = client.params if flags.augmentation == "local" else global_params
    by_id = {t.task_id: t for t in client.tasks}
    records = []
    for split in client.splits:
        task = by_id[split.task_id]
        prompts = [format_prompt(task, ex.input) for ex in split.train]
        try:
            decoded = greedy_decode_batch(generator, prompts, task.max_decode_len)
        except Exception as exc:
            raise RuntimeError(f"pseudo-label decoding failed for task {task.task_id}: {exc}") from exc
        records.extend(PseudoRecord(p, toks, logits, task.task_id) for p, (toks, logits) in zip(prompts, decoded))
    return records


def ditto_regularized_loss(base_loss: float, local: ModelParams, global_params: ModelParams, lam: float = 1.0) -> float:
    return float(base_loss + lam * local.sq_distance(global_params))


def _pseudo_items(records, flags: StrategyFlags, energy: EnergyConfig):
    items = []
    for r in records:
        if flags.pseudo_weighting == "energy":
            w = pseudo_token_weights(r.step_logits, energy)
        else:
            w = np.full(len(r.target), 1.0 / len(r.target))
        items.append((r.prompt, r.target, w))
    return items


@dataclass(frozen=True)
class UpdateStats:
    train_examples: int = 0
    gradient_passes: int = 0
    sgd_steps: int = 0
    generated: int = 0


def _proximal_grad(params: ModelParams, anchor: ModelParams, lam: float) -> GradientSet:
    return GradientSet(*((2.0 * lam) * (a - b) for a, b in zip(params.arrays(), anchor.arrays())))


def _sgd_epochs(params, annotated, pseudo, anchor, flags, config, rng):
    records = [(item, 0) for item in annotated] + [(item, 1) for item in pseudo]
    sums, counts = np.zeros(2), np.zeros(2)
    steps = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), config.batch_size):
            chunk = [records[i] for i in order[start: start + config.batch_size]]
            grads, losses = backward_with_losses(params, [item for item, _ in chunk])
            for (_, tag), loss in zip(chunk, losses):
                sums[tag] += loss
                counts[tag] += 1
            if flags.proximal:
                grads = grads + _proximal_grad(params, anchor, config.ditto_lambda)
            params = sgd_step(params, grads, config.lr)
            steps += 1
    n = len(records) * config.local_epochs
    return params, sums, counts, UpdateStats(train_examples=n, gradient_passes=n, sgd_steps=steps)


def _meta_epochs(params, annotated, pseudo, config, rng):
    sums, counts = np.zeros(2), np.zeros(2)
    steps = passes = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(len(annotated))
        for start in range(0, len(order), config.batch_size):
            idx = order[start: start + config.batch_size]
            clean = [annotated[i] for i in idx]
            step = meta_weight_step(params, clean, [pseudo[i] for i in idx], config.lr)
            params = step.params
            b = len(idx)
            sums += [step.clean_loss * b, step.pseudo_loss * b]
            counts += [b, b]
            # per-example pseudo grads, clean grads at the virtual point, clean grads at the real point
            passes += 3 * b
            steps += 1
    n = 2 * len(annotated) * config.local_epochs
    return params, sums, counts, UpdateStats(train_examples=n, gradient_passes=passes, sgd_steps=steps)


def client_update(
    client: ClientState,
    global_params: ModelParams,
    strategy: str,
    config: TrainConfig,
    round_index: int = 0,
    seed: int = 0,
    pseudo: list | None = None,
    carries_loss: bool | None = None,
) -> tuple[ClientState, RoundMessage, UpdateStats]:
    """Local training for one round; returns the new state, its upload and cost counters."""
    flags = strategy_flags(strategy)
    if not client.splits:
        raise ConfigurationError(f"client {client.client_id} holds no data")
    params = global_params if flags.replace_local else client.params
    if pseudo is None:
        pseudo = generate_pseudo_labels(global_params, client, strategy)
    annotated = client.annotated_records()
    pseudo_items = _pseudo_items(pseudo, flags, config.energy)
    rng = child_rng(seed, "shuffle", round_index, client.client_id)

    if config.local_epochs == 0:
        sums = np.array([example_losses(params, annotated).sum(),
                         example_losses(params, pseudo_items).sum() if pseudo_items else 0.0])
        counts = np.array([len(annotated), len(pseudo_items)], dtype=float)
        stats = UpdateStats()
    elif flags.pseudo_weighting == "meta" and pseudo_items:
        params, sums, counts, stats = _meta_epochs(params, annotated, pseudo_items, config, rng)
    else:
        params, sums, counts, stats = _sgd_epochs(params, annotated, pseudo_items, global_params, flags, config, rng)
    stats = replace(stats, generated=len(pseudo))

    loss_annotated = float(sums[0] / counts[0]) if counts[0] else 0.0
    loss_pseudo = float(sums[1] / counts[1]) if counts[1] else 0.0
    total = loss_annotated + loss_pseudo
    if not np.isfinite(total) or total < 0:
        raise RoundFailure(f"client {client.client_id}: invalid training loss {total!r} in round {round_index}")
    new_client = replace(client, params=params, last_loss=total, loss_pseudo=loss_pseudo, loss_annotated=loss_annotated)
    if carries_loss is None:
        carries_loss = flags.aggregation == "loss_proportional"
    message = RoundMessage(
        "upload", f"client{client.client_id}",
        params.nbytes + (LOSS_SCALAR_BYTES if carries_loss else 0),
        carries_params=True, carries_loss=carries_loss,
    )
    return new_client, message, stats


# --- aggregation -------------------------------------------------------------------

def _anchored_combination(models: Sequence[ModelParams], weights: np.ndarray) -> ModelParams:
    # anchor + sum w_i (m_i - anchor): equals sum w_i m_i when sum w = 1, and is
    # exactly the anchor when all models coincide
    anchor = models[0]
    out = [a.copy() for a in anchor.arrays()]
    for w, m in zip(weights, models):
        for acc, a, b in zip(out, m.arrays(), anchor.arrays()):
            acc += w * (a - b)
    return ModelParams(*out)


def data_size_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ConfigurationError("no uploads to aggregate")
    if (sizes < 0).any() or sizes.sum() <= 0:
        raise ConfigurationError(f"data sizes must be positive, got {sizes.tolist()}")
    return sizes / sizes.sum()


def loss_proportional_weights(losses) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ConfigurationError("no uploads to aggregate")
    if (losses < 0).any() or not np.isfinite(losses).all():
        raise ConfigurationError(f"client losses must be finite and >= 0, got {losses.tolist()}")
    total = losses.sum()
    if total == 0:
        log.warning("all client losses are zero; falling back to uniform aggregation weights")
        return np.full(losses.size, 1.0 / losses.size)
    return losses / total


def aggregate_fedavg(uploads: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    weights = data_size_weights([n for _, n in uploads])
    return _anchored_combination([p for p, _ in uploads], weights)


def aggregate_dynamic(uploads: Sequence[tuple[ModelParams, float]]) -> tuple[ModelParams, np.ndarray]:
    weights = loss_proportional_weights([loss for _, loss in uploads])
    return _anchored_combination([p for p, _ in uploads], weights), weights


# --- rounds ------------------------------------------------------------------------

@dataclass
class RoundLog:
    round: int
    strategy: str
    aggregation: str | None
    flags: dict
    clients: list
    broadcast_bytes: int
    upload_bytes: int
    weights: list | None

    def to_dict(self) -> dict:
        return asdict(self)


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    strategy: str,
    config: TrainConfig,
    seed: int = 0,
    timer: dict | None = None,
) -> tuple[ServerState, list[ClientState], RoundLog]:
    """One broadcast / local-update / aggregate cycle.

    ``timer``, if given, accumulates wall-clock seconds under "generate" and
    "train"; it is kept out of the round log so logs stay deterministic.
    """
    timer = {} if timer is None else timer
    flags = strategy_flags(strategy)
    t = server.round
    mode = aggregation_mode(strategy, t, config) if flags.federated else None
    try:
        messages = broadcast(server, clients, strategy)
        clients = sorted(clients, key=lambda c: c.client_id)
        updated, uploads, reports = [], [], []
        for client in clients:
            t0 = time.perf_counter()
            pseudo = generate_pseudo_labels(server.global_params, client, strategy)
            t1 = time.perf_counter()
            new, msg, stats = client_update(
                client, server.global_params, strategy, config, t, seed,
                pseudo=pseudo, carries_loss=(mode == "loss_proportional"),
            )
            timer["generate"] = timer.get("generate", 0.0) + t1 - t0
            timer["train"] = timer.get("train", 0.0) + time.perf_counter() - t1
            updated.append(new)
            uploads.append(msg if flags.federated else None)
            reports.append({
                "client": new.client_id,
                "loss": new.last_loss,
                "loss_pseudo": new.loss_pseudo,
                "loss_annotated": new.loss_annotated,
                "n": new.data_size,
                "delta": None,
                "upload_bytes": msg.payload_bytes if flags.federated else 0,
                "carries_loss": bool(flags.federated and msg.carries_loss),
                **asdict(stats),
            })

        weights = None
        new_server = replace(server, round=t + 1)
        if flags.federated:
            models = [c.params for c in updated]
            if mode == "loss_proportional":
                weights = loss_proportional_weights([c.last_loss for c in updated])
            else:
                weights = data_size_weights([c.data_size for c in updated])
            new_global = _anchored_combination(models, weights)
            if not new_global.is_finite():
                raise RoundFailure("aggregated global model is not finite")
            for r, w in zip(reports, weights):
                r["delta"] = float(w)
            weights = [float(w) for w in weights]
            new_server = replace(new_server, global_params=new_global, history=server.history + (tuple(weights),))
    except RoundFailure:
        raise
    except Exception as exc:
        raise RoundFailure(f"round {t} aborted: {exc}") from exc

    log_entry = RoundLog(
        round=t,
        strategy=strategy,
        aggregation=mode,
        flags=asdict(flags),
        clients=reports,
        broadcast_bytes=sum(m.payload_bytes for m in messages),
        upload_bytes=sum(m.payload_bytes for m in uploads if m is not None),
        weights=weights,
    )
    return new_server, updated, log_entry


# --- full runs ---------------------------------------------------------------------

@dataclass
class RunResult:
    strategy: str
    seed: int
    metrics: list  # TaskMetric, suite order
    initial_metrics: list
    round_logs: list
    server: ServerState = field(repr=False)
    clients: list = field(repr=False)

    @property
    def trajectory(self) -> list:
        return [list(w) for w in self.server.history]


def build_splits(suite: Sequence[TaskSpec], seed: int) -> dict:
    split_seed = child_seed(seed, "split")
    return {t.task_id: sample_few_shot(t, split_seed) for t in suite}


def build_clients(suite, assignment: ClientAssignment, splits: dict, params: ModelParams, pooled: bool = False) -> list[ClientState]:
    if pooled:
        return [ClientState(0, params, tuple(suite), tuple(splits[t.task_id] for t in suite))]
    clients = []
    for k in range(assignment.num_clients):
        tasks = tuple(t for t in suite if assignment.mapping[t.task_id] == k)
        clients.append(ClientState(k, params, tasks, tuple(splits[t.task_id] for t in tasks)))
    return clients


def evaluate_clients(clients: Sequence[ClientState], suite: Sequence[TaskSpec]) -> list[TaskMetric]:
    owner = {}
    for c in clients:
        for task, split in zip(c.tasks, c.splits):
            owner[task.task_id] = (c.params, task, split)
    return [evaluate(*owner[t.task_id]) for t in suite]


def _validate(suite, assignment: ClientAssignment, vocab_size: int) -> None:
    problems = []
    ids = [t.task_id for t in suite]
    if len(set(ids)) != len(ids):
        problems.append("duplicate task ids in suite")
    if set(assignment.mapping) != set(ids):
        problems.append("assignment does not cover exactly the suite's tasks")
    if any(not 0 <= c < assignment.num_clients for c in assignment.mapping.values()):
        problems.append("assignment refers to a client index out of range")
    elif set(assignment.mapping.values()) != set(range(assignment.num_clients)):
        problems.append("some client holds no tasks")
    if any(t.vocab_size != vocab_size for t in suite):
        problems.append("tasks disagree on vocabulary size")
    if problems:
        raise ConfigurationError("; ".join(problems))


def run_training(
    suite: Sequence[TaskSpec],
    assignment: ClientAssignment,
    strategy: str,
    config: TrainConfig,
    seed: int = 0,
    splits: dict | None = None,
    checkpoint_dir=None,
    timer: dict | None = None,
) -> RunResult:
    """Initialize from ``seed``, run ``config.rounds`` rounds and evaluate every client."""
    flags = strategy_flags(strategy)
    config.validate()
    if not suite:
        raise ConfigurationError("empty task suite")
    vocab_size = suite[0].vocab_size
    _validate(suite, assignment, vocab_size)
    if splits is None:
        splits = build_splits(suite, seed)

    init = ModelParams.init(vocab_size, config.d, child_seed(seed, "init"), config.init_scale)
    server = ServerState(init, 0, flags.aggregation)
    clients = build_clients(suite, assignment, splits, init, pooled=flags.pooled)
    initial_metrics = evaluate_clients(clients, suite)

    logs = []
    for _ in range(config.rounds):
        server, clients, entry = run_round(server, clients, strategy, config, seed, timer)
        logs.append(entry)
        if checkpoint_dir is not None:
            round_dir = Path(checkpoint_dir) / f"round{entry.round}"
            server.global_params.save(round_dir / "global.ckpt")
            for c in clients:
                c.params.save(round_dir / f"client{c.client_id}.ckpt")

    metrics = evaluate_clients(clients, suite) if config.rounds else list(initial_metrics)
    return RunResult(strategy, seed, metrics, initial_metrics, logs, server, clients)


def communication_summary(round_logs: Sequence[RoundLog]) -> dict:
    """Per-round and total byte and work counters."""
    keys = ("generated", "train_examples", "gradient_passes", "sgd_steps")
    rounds = []
    for entry in round_logs:
        row = {"round": entry.round, "broadcast_bytes": entry.broadcast_bytes, "upload_bytes": entry.upload_bytes}
        for k in keys:
            row[k] = sum(c[k] for c in entry.clients)
        rounds.append(row)
    total = {k: sum(r[k] for r in rounds) for k in ("broadcast_bytes", "upload_bytes", *keys)}
    return {"rounds": rounds, "total": total}
