"""Tiny teacher-forced conditional token generator with hand-written gradients.

Architecture, for a prompt ``p`` and previous-token sequence ``y_prev``::

    context = tanh(mean(embed[p]) @ enc)
    h_t     = tanh(embed[y_prev_t] @ dec + context)
    logits  = h_t @ out_proj

``y_prev`` is ``[BOS, y_0, ..., y_{L-2}]``.  Everything is batched over padded
arrays; the single-sequence functions are thin wrappers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericalError
from .tasks import BOS, EOS, PAD

FIELDS = ("embed", "enc", "dec", "out_proj")
CHECKPOINT_MAGIC = b"FWL1"
_HEADER = struct.Struct("<4sII")


class _TensorSet:
    """Fieldwise arithmetic shared by parameters and gradients."""

    embed: np.ndarray
    enc: np.ndarray
    dec: np.ndarray
    out_proj: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in FIELDS)

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def d(self) -> int:
        return self.embed.shape[1]

    def _new(self, arrays):
        return type(self)(*arrays)

    def __add__(self, other):
        return self._new(a + b for a, b in zip(self.arrays(), other.arrays()))

    def __sub__(self, other):
        return self._new(a - b for a, b in zip(self.arrays(), other.arrays()))

    def __mul__(self, scalar):
        return self._new(a * scalar for a in self.arrays())

    __rmul__ = __mul__

    def sq_norm(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equal(self, other) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def allclose(self, other, rtol=1e-7, atol=0.0) -> bool:
        return all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.arrays(), other.arrays()))

    def check_congruent(self, other) -> None:
        for f, a, b in zip(FIELDS, self.arrays(), other.arrays()):
            if a.shape != b.shape:
                raise ValueError(f"shape mismatch in {f}: {a.shape} vs {b.shape}")


@dataclass(frozen=True, eq=False)
class ModelParams(_TensorSet):
    embed: np.ndarray
    enc: np.ndarray
    dec: np.ndarray
    out_proj: np.ndarray

    def __post_init__(self):
        v, d = self.embed.shape
        expected = {"enc": (d, d), "dec": (d, d), "out_proj": (d, v)}
        for f, shape in expected.items():
            if getattr(self, f).shape != shape:
                raise ValueError(f"{f} has shape {getattr(self, f).shape}, expected {shape}")

    @classmethod
    def init(cls, vocab_size: int, d: int = 32, seed: int = 0, scale: float = 0.1) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, scale, (vocab_size, d)),
            rng.normal(0.0, scale, (d, d)),
            rng.normal(0.0, scale, (d, d)),
            rng.normal(0.0, scale, (d, vocab_size)),
        )

    @classmethod
    def zeros(cls, vocab_size: int, d: int = 32) -> "ModelParams":
        return cls(np.zeros((vocab_size, d)), np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, vocab_size)))

    def sq_distance(self, other: "ModelParams") -> float:
        self.check_congruent(other)
        return (self - other).sq_norm()

    # --- checkpoint format ---------------------------------------------------

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CHECKPOINT_MAGIC, self.vocab_size, self.d)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        magic, v, d = _HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        shapes = [(v, d), (d, d), (d, d), (d, v)]
        expected = _HEADER.size + 8 * sum(r * c for r, c in shapes)
        if len(data) != expected:
            raise ValueError(f"checkpoint has {len(data)} bytes, expected {expected}")
        arrays, offset = [], _HEADER.size
        for r, c in shapes:
            arr = np.frombuffer(data, dtype="<f8", count=r * c, offset=offset).reshape(r, c)
            arrays.append(arr.astype(np.float64))
            offset += 8 * r * c
        return cls(*arrays)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def nbytes(self) -> int:
        return _HEADER.size + 8 * sum(a.size for a in self.arrays())


@dataclass(frozen=True, eq=False)
class GradientSet(_TensorSet):
    embed: np.ndarray
    enc: np.ndarray
    dec: np.ndarray
    out_proj: np.ndarray


def linear_combination(items: Sequence[_TensorSet], coeffs: Sequence[float]):
    """Fieldwise ``sum(c_i * x_i)``, reduced in the given order."""
    if len(items) != len(coeffs) or not items:
        raise ValueError("need one coefficient per item and at least one item")
    out = [coeffs[0] * a for a in items[0].arrays()]
    for c, item in zip(coeffs[1:], items[1:]):
        out = [acc + c * a for acc, a in zip(out, item.arrays())]
    return type(items[0])(*out)


# --- batching ----------------------------------------------------------------

def pad(seqs: Sequence[Sequence[int]], fill: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
        mask[i, : len(s)] = True
    return arr, mask


def _check_ids(arr: np.ndarray, mask: np.ndarray, vocab_size: int, what: str) -> None:
    bad = mask & ((arr < 0) | (arr >= vocab_size))
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise ValueError(f"{what} of example {i} contains token ids outside [0, {vocab_size})")


def _shifted(targets: np.ndarray) -> np.ndarray:
    prev = np.empty_like(targets)
    prev[:, 0] = BOS
    prev[:, 1:] = targets[:, :-1]
    return prev


def _encode(params: ModelParams, prompts: np.ndarray, pmask: np.ndarray):
    counts = pmask.sum(axis=1, keepdims=True).astype(np.float64)
    pooled = (params.embed[prompts] * pmask[..., None]).sum(axis=1) / counts
    context = np.tanh(pooled @ params.enc)
    return pooled, context, counts


def _decode_states(params: ModelParams, prev: np.ndarray, context: np.ndarray):
    emb = params.embed[prev]
    hidden = np.tanh(emb @ params.dec + context[:, None, :])
    return emb, hidden


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward_batch(params: ModelParams, prompts, targets) -> tuple[np.ndarray, np.ndarray]:
    """Padded logits ``[B, L, V]`` and the target mask ``[B, L]``."""
    p, pmask = pad(prompts)
    t, tmask = pad(targets)
    _check_ids(p, pmask, params.vocab_size, "prompt")
    _check_ids(t, tmask, params.vocab_size, "target")
    if not pmask.any(axis=1).all() or not tmask.any(axis=1).all():
        raise ValueError("prompts and targets must be non-empty")
    _, context, _ = _encode(params, p, pmask)
    _, hidden = _decode_states(params, _shifted(t), context)
    return hidden @ params.out_proj, tmask


def forward(params: ModelParams, prompt: Sequence[int], target: Sequence[int]) -> np.ndarray:
    """Per-position logits ``[len(target), V]`` under teacher forcing."""
    if len(target) == 0:
        raise ValueError("target must be non-empty")
    logits, _ = forward_batch(params, [prompt], [target])
    return logits[0]


def nll_loss(logits: np.ndarray, target: Sequence[int], token_weights=None) -> tuple[float, np.ndarray]:
    """Weighted sequence NLL and the per-token losses."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(target):
        raise ValueError(f"{logits.shape[0] if logits.ndim == 2 else '?'} logit rows for {len(target)} targets")
    per_token = -log_softmax(logits)[np.arange(len(target)), target]
    if token_weights is None:
        weights = np.ones(len(target))
    else:
        weights = np.asarray(token_weights, dtype=np.float64)
        if weights.shape != (len(target),):
            raise ValueError(f"{weights.shape} weights for {len(target)} targets")
    return float(weights @ per_token), per_token


def _weight_matrix(batch, tmask: np.ndarray) -> np.ndarray:
    w = tmask.astype(np.float64)
    for i, item in enumerate(batch):
        tw = item[2] if len(item) > 2 else None
        if tw is not None:
            tw = np.asarray(tw, dtype=np.float64)
            if tw.shape != (len(item[1]),):
                raise ValueError(f"example {i}: {tw.shape} weights for {len(item[1])} targets")
            w[i, : len(tw)] = tw
    return w


def example_losses(params: ModelParams, batch) -> np.ndarray:
    """Weighted NLL of each ``(prompt, target[, weights])`` item."""
    logits, tmask = forward_batch(params, [b[0] for b in batch], [b[1] for b in batch])
    t, _ = pad([b[1] for b in batch])
    nll = -np.take_along_axis(log_softmax(logits), t[..., None], axis=-1)[..., 0]
    return (nll * _weight_matrix(batch, tmask)).sum(axis=1)


def backward(params: ModelParams, batch) -> tuple[GradientSet, float]:
    """Exact gradient of the batch-mean weighted NLL.

    ``batch`` holds ``(prompt, target)`` or ``(prompt, target, token_weights)``
    items; missing weights mean 1 per token.
    """
    grads, losses = backward_with_losses(params, batch)
    return grads, float(losses.mean())


def backward_with_losses(params: ModelParams, batch) -> tuple[GradientSet, np.ndarray]:
    """Like :func:`backward` but also returns each item's weighted loss."""
    if not batch:
        raise ValueError("empty batch")
    p, pmask = pad([b[0] for b in batch])
    t, tmask = pad([b[1] for b in batch])
    _check_ids(p, pmask, params.vocab_size, "prompt")
    _check_ids(t, tmask, params.vocab_size, "target")
    weights = _weight_matrix(batch, tmask)
    n = len(batch)

    pooled, context, counts = _encode(params, p, pmask)
    prev = _shifted(t)
    emb, hidden = _decode_states(params, prev, context)
    logits = hidden @ params.out_proj
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    losses = (nll * weights).sum(axis=1)
    if not np.isfinite(losses).all():
        i = int(np.flatnonzero(~np.isfinite(losses))[0])
        raise NumericalError(f"non-finite loss at example {i}", index=i)

    dz = np.exp(logp)
    np.put_along_axis(dz, t[..., None], np.take_along_axis(dz, t[..., None], axis=-1) - 1.0, axis=-1)
    dz *= weights[..., None] / n
    g_out = np.einsum("btd,btv->dv", hidden, dz)
    da = (dz @ params.out_proj.T) * (1.0 - hidden**2)
    g_dec = np.einsum("btd,bte->de", emb, da)
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, prev, da @ params.dec.T)
    du = da.sum(axis=1) * (1.0 - context**2)
    g_enc = pooled.T @ du
    dpooled = (du @ params.enc.T) / counts
    np.add.at(g_embed, p, dpooled[:, None, :] * pmask[..., None])
    return GradientSet(g_embed, g_enc, g_dec, g_out), losses


def sgd_step(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"learning rate must be a finite non-negative number, got {lr}")
    params.check_congruent(grads)
    new = ModelParams(*(a - lr * g for a, g in zip(params.arrays(), grads.arrays())))
    if not new.is_finite():
        raise NumericalError("SGD update produced non-finite parameters")
    return new


def greedy_decode_batch(params: ModelParams, prompts, max_len: int) -> list[tuple[list[int], np.ndarray]]:
    """Greedy decode every prompt; stops per sequence after EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be positive")
    p, pmask = pad(prompts)
    _check_ids(p, pmask, params.vocab_size, "prompt")
    _, context, _ = _encode(params, p, pmask)
    n = len(prompts)
    prev = np.full(n, BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    tokens = np.full((n, max_len), PAD, dtype=np.int64)
    step_logits = np.zeros((n, max_len, params.vocab_size))
    lengths = np.zeros(n, dtype=np.int64)
    for step in range(max_len):
        hidden = np.tanh(params.embed[prev] @ params.dec + context)
        z = hidden @ params.out_proj
        tok = np.argmax(z, axis=1)  # first maximum, i.e. lowest id on ties
        live = ~done
        tokens[live, step] = tok[live]
        step_logits[live, step] = z[live]
        lengths[live] += 1
        done |= tok == EOS
        prev = tok
        if done.all():
            break
    return [(tokens[i, : lengths[i]].tolist(), step_logits[i, : lengths[i]]) for i in range(n)]


def greedy_decode(params: ModelParams, prompt: Sequence[int], max_len: int) -> tuple[list[int], np.ndarray]:
    return greedy_decode_batch(params, [prompt], max_len)[0]
