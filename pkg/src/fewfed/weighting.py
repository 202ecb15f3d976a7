"""Pseudo-label weighting: top-k energy token weights and the meta-weighting baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError
from .model import GradientSet, ModelParams, backward, example_losses, forward, linear_combination, nll_loss, sgd_step


@dataclass(frozen=True)
class EnergyConfig:
    temperature: float = 1.0
    top_k: int = 7
    weight_floor: float = 1e-6

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ConfigurationError(f"top_k must be an integer >= 1, got {self.top_k}")
        if not self.weight_floor > 0:
            raise ConfigurationError(f"weight_floor must be > 0, got {self.weight_floor}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("expected a non-empty logit vector")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    return z


def _energy(z: np.ndarray, temperature: float) -> float:
    s = z / temperature
    m = s.max()
    return float(-temperature * (m + np.log(np.exp(s - m).sum())))


def full_vocab_energy(logits, temperature: float = 1.0) -> float:
    """``-T * logsumexp(logits / T)`` over the whole vocabulary."""
    return _energy(_as_logits(logits), temperature)


def top_k_indices(z: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal values keep ascending index order
    return np.argsort(-z, kind="stable")[: min(k, z.size)]


def token_energy(logits, config: EnergyConfig = EnergyConfig()) -> float:
    """Energy restricted to the ``top_k`` largest logits."""
    z = _as_logits(logits)
    if config.top_k >= z.size:
        return _energy(z, config.temperature)
    return _energy(z[top_k_indices(z, config.top_k)], config.temperature)


def sequence_token_weights(energies, config: EnergyConfig = EnergyConfig()) -> np.ndarray:
    """Normalized negative energies; each raw weight is floored at ``weight_floor``."""
    e = np.asarray(energies, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ValueError("need at least one token energy")
    raw = np.maximum(-e, config.weight_floor)
    return raw / raw.sum()


def pseudo_token_weights(step_logits, config: EnergyConfig = EnergyConfig()) -> np.ndarray:
    return sequence_token_weights([token_energy(row, config) for row in np.asarray(step_logits)], config)


def weighted_pseudo_loss(params: ModelParams, prompt, pseudo_target, step_logits, config: EnergyConfig = EnergyConfig()) -> float:
    """NLL of ``pseudo_target`` under ``params`` with energy weights from the generator's logits."""
    step_logits = np.asarray(step_logits)
    if step_logits.shape[0] != len(pseudo_target):
        raise ValueError(f"{step_logits.shape[0]} logit rows for a pseudo label of length {len(pseudo_target)}")
    weights = pseudo_token_weights(step_logits, config)
    total, _ = nll_loss(forward(params, prompt, pseudo_target), pseudo_target, weights)
    return total


def energy_distribution_report(logit_batches, config: EnergyConfig = EnergyConfig(), bins: int = 30) -> dict:
    """Paired full-vocabulary and top-k energies with shared fixed-width histogram bins."""
    rows = [np.asarray(r, dtype=np.float64) for r in logit_batches]
    if not rows:
        raise ValueError("need at least one logit vector")
    full = np.array([full_vocab_energy(r, config.temperature) for r in rows])
    topk = np.array([token_energy(r, config) for r in rows])
    lo = float(min(full.min(), topk.min()))
    hi = float(max(full.max(), topk.max()))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return {
        "config": config.to_dict(),
        "bin_edges": edges.tolist(),
        "full": {"samples": full.tolist(), "counts": np.histogram(full, edges)[0].tolist()},
        "topk": {"samples": topk.tolist(), "counts": np.histogram(topk, edges)[0].tolist()},
    }


# --- meta weighting ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MetaStep:
    params: ModelParams
    weights: np.ndarray
    eps_grad: np.ndarray
    clean_loss: float
    pseudo_loss: float


def sample_weights_from_eps_grad(eps_grad) -> np.ndarray:
    """``max(-grad, 0)`` normalized to sum 1; all zeros when nothing is positive."""
    w = np.maximum(-np.asarray(eps_grad, dtype=np.float64), 0.0)
    total = w.sum()
    return w / total if total > 0 else w


def _per_example_grads(params: ModelParams, batch) -> tuple[list[GradientSet], np.ndarray]:
    grads, losses = [], []
    for item in batch:
        g, loss = backward(params, [item])
        grads.append(g)
        losses.append(loss)
    return grads, np.array(losses)


def virtual_params(params: ModelParams, pseudo_grads, eps, lr: float) -> ModelParams:
    """One SGD step on ``sum_j eps_j * l_pseudo_j`` from ``params``."""
    step = linear_combination(pseudo_grads, list(eps))
    return ModelParams(*(a - lr * g for a, g in zip(params.arrays(), step.arrays())))


def clean_sum_loss(params: ModelParams, clean_batch) -> float:
    return float(example_losses(params, clean_batch).sum())


def meta_weight_step(params: ModelParams, clean_batch, pseudo_batch, lr: float) -> MetaStep:
    """One learning-to-reweight step over paired clean/pseudo mini-batches.

    The perturbation ``eps`` scales each pseudo example's loss inside a virtual
    SGD step; its gradient is ``-lr * <g_pseudo_j(F), g_clean(F')>``.  The real
    update then minimizes ``sum_j w_j * l_pseudo_j + mean_j l_clean_j``.
    """
    if not lr > 0:
        raise ConfigurationError(f"meta-weighting lr must be > 0, got {lr}")
    if not clean_batch or not pseudo_batch:
        raise ValueError("both batches must be non-empty")
    if len(clean_batch) != len(pseudo_batch):
        raise ValueError(f"clean batch has {len(clean_batch)} items, pseudo batch {len(pseudo_batch)}")
    b = len(clean_batch)

    pseudo_grads, pseudo_losses = _per_example_grads(params, pseudo_batch)
    shifted = virtual_params(params, pseudo_grads, np.ones(b), lr)
    g_clean_mean, _ = backward(shifted, clean_batch)
    g_clean = g_clean_mean.flat() * b  # gradient of the summed clean loss
    eps_grad = np.array([-lr * float(g.flat() @ g_clean) for g in pseudo_grads])
    if not np.isfinite(eps_grad).all():
        raise NumericalError("non-finite eps gradient", index=int(np.flatnonzero(~np.isfinite(eps_grad))[0]))
    weights = sample_weights_from_eps_grad(eps_grad)

    g_real, clean_loss = backward(params, clean_batch)
    if weights.any():
        g_real = g_real + linear_combination(pseudo_grads, list(weights))
    new_params = sgd_step(params, g_real, lr)
    return MetaStep(new_params, weights, eps_grad, clean_loss, float(weights @ pseudo_losses))
