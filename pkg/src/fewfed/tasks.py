"""Synthetic multi-task text-to-text suites, few-shot splits and client assignment.

Every task maps an input token sequence to a target sequence through a
deterministic family function, so ground truth is exact.  All tasks of a suite
share one vocabulary::

    0 PAD | 1 BOS | 2 EOS | 3 SEP | 4 COLON | task-name block | symbol block

A task's tokens are drawn from the symbol block.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

PAD, BOS, EOS, SEP, COLON = 0, 1, 2, 3, 4
NUM_RESERVED = 5
DEFAULT_NUM_SYMBOLS = 12

CATEGORIES = ("classification", "qa", "conditional_generation", "other")
FAMILIES = ("copy", "reverse", "substitution_cipher", "token_majority", "arithmetic_mod")
CATEGORY_ALIASES = {"cond_gen": "conditional_generation", "cls": "classification"}

# category -> families a task of that category may be drawn from
CATEGORY_FAMILIES = {
    "classification": ("token_majority",),
    "qa": ("arithmetic_mod",),
    "conditional_generation": ("copy", "reverse", "substitution_cipher"),
    "other": ("copy", "reverse", "substitution_cipher"),
}

# 45 classification, 41 QA, 5 conditional generation, 27 other out of 118
DEFAULT_CATEGORY_MIX = {
    "classification": 45 / 118,
    "qa": 41 / 118,
    "conditional_generation": 5 / 118,
    "other": 27 / 118,
}

CLASSIFICATION_SHOTS = 16
GENERATION_SHOTS = 32

# stream tags used to derive independent per-task generators
_STREAM_SPEC = 11
_STREAM_SPLIT = 12
_STREAM_ASSIGN = 13


def _task_key(task_id: str) -> int:
    return zlib.crc32(task_id.encode("utf-8"))


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) & 0xFFFFFFFF for e in entropy]))


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    name: str
    category: str
    family: str
    vocab_size: int
    input_len: tuple[int, int]
    target_len: tuple[int, int]
    name_token: int
    symbol_offset: int
    num_symbols: int
    family_params: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigurationError(f"unknown category {self.category!r}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be at least 4")
        if self.category == "classification" and tuple(self.target_len) != (1, 1):
            raise ConfigurationError("classification tasks need target_len exactly 1")
        if self.symbol_offset + self.num_symbols > self.vocab_size:
            raise ConfigurationError("symbol block exceeds vocabulary")
        if not NUM_RESERVED <= self.name_token < self.symbol_offset:
            raise ConfigurationError("name token must sit in the task-name block")

    @property
    def is_classification(self) -> bool:
        return self.category == "classification"

    @property
    def shots(self) -> int:
        return CLASSIFICATION_SHOTS if self.is_classification else GENERATION_SHOTS

    @property
    def max_decode_len(self) -> int:
        # longest target plus room for EOS and one stray token
        return self.target_len[1] + 2

    def alphabet(self) -> list[int]:
        """Token ids this task's inputs are drawn from."""
        symbols = self.family_params.get("alphabet", list(range(self.num_symbols)))
        return [self.symbol_offset + s for s in symbols]

    def apply(self, tokens: Sequence[int]) -> list[int]:
        """Ground-truth family function."""
        sym = [t - self.symbol_offset for t in tokens]
        if any(s < 0 or s >= self.num_symbols for s in sym):
            raise ValueError(f"token outside the symbol block of task {self.task_id}")
        fam = self.family
        if fam == "copy":
            out = sym
        elif fam == "reverse":
            out = sym[::-1]
        elif fam == "substitution_cipher":
            perm = self.family_params["permutation"]
            out = [perm[s] for s in sym]
        elif fam == "token_majority":
            counts = np.bincount(sym, minlength=self.num_symbols)
            out = [int(np.argmax(counts))]  # ties -> lowest symbol
        else:  # arithmetic_mod
            m = self.family_params["modulus"]
            shift = self.family_params["shift"]
            out = [(max(sym) + shift) % m, (min(sym) + shift) % m]
        return [self.symbol_offset + s for s in out]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_len"] = list(self.input_len)
        d["target_len"] = list(self.target_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["input_len"] = tuple(d["input_len"])
        d["target_len"] = tuple(d["target_len"])
        return cls(**d)


@dataclass(frozen=True)
class Example:
    task_id: str
    input: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class FewShotSplit:
    task_id: str
    train: tuple[Example, ...]
    test: tuple[Example, ...]
    seed: int


@dataclass(frozen=True)
class ClientAssignment:
    num_clients: int
    mapping: dict  # task_id -> client index

    def tasks_of(self, client: int) -> list[str]:
        return [t for t, c in self.mapping.items() if c == client]

    def counts(self) -> list[int]:
        counts = [0] * self.num_clients
        for c in self.mapping.values():
            counts[c] += 1
        return counts


def vocabulary_size(num_tasks: int, num_symbols: int = DEFAULT_NUM_SYMBOLS) -> int:
    return NUM_RESERVED + num_tasks + num_symbols


def normalize_mix(mix: dict) -> dict:
    out = {}
    for key, frac in mix.items():
        cat = CATEGORY_ALIASES.get(key, key)
        if cat not in CATEGORIES:
            raise ConfigurationError(f"unknown category {key!r} in category mix")
        if frac < 0:
            raise ConfigurationError(f"negative fraction for category {key!r}")
        out[cat] = out.get(cat, 0.0) + float(frac)
    if abs(sum(out.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"category fractions sum to {sum(out.values())!r}, expected 1")
    return out


def apportion(total: int, fractions: dict) -> dict:
    """Largest-remainder apportionment; ties go to the earlier category."""
    quotas = {c: total * fractions.get(c, 0.0) for c in CATEGORIES}
    counts = {c: math.floor(q) for c, q in quotas.items()}
    left = total - sum(counts.values())
    order = sorted(CATEGORIES, key=lambda c: (-(quotas[c] - counts[c]), CATEGORIES.index(c)))
    for c in order[:left]:
        counts[c] += 1
    return counts


def _family_params(family: str, num_symbols: int, rng: np.random.Generator) -> dict:
    if family == "substitution_cipher":
        return {"permutation": [int(p) for p in rng.permutation(num_symbols)]}
    if family == "token_majority":
        labels = sorted(int(s) for s in rng.choice(num_symbols, size=4, replace=False))
        return {"alphabet": labels}
    if family == "arithmetic_mod":
        return {"modulus": num_symbols, "shift": int(rng.integers(1, num_symbols))}
    return {}


_LENGTHS = {
    "copy": ((2, 4), None),
    "reverse": ((2, 4), None),
    "substitution_cipher": ((2, 4), None),
    "token_majority": ((4, 6), (1, 1)),
    "arithmetic_mod": ((2, 4), (2, 2)),
}


def make_task(
    index: int,
    category: str,
    family: str,
    num_tasks: int,
    seed: int,
    num_symbols: int = DEFAULT_NUM_SYMBOLS,
    input_len: tuple[int, int] | None = None,
) -> TaskSpec:
    """Build one task spec at position ``index`` of a ``num_tasks`` suite."""
    task_id = f"t{index:03d}"
    rng = _rng(seed, _STREAM_SPEC, _task_key(task_id), FAMILIES.index(family))
    in_len, tgt_len = _LENGTHS[family]
    if input_len is not None:
        in_len = tuple(input_len)
    if tgt_len is None:
        tgt_len = in_len
    return TaskSpec(
        task_id=task_id,
        name=f"{family}_{index}",
        category=category,
        family=family,
        vocab_size=vocabulary_size(num_tasks, num_symbols),
        input_len=tuple(in_len),
        target_len=tuple(tgt_len),
        name_token=NUM_RESERVED + index,
        symbol_offset=NUM_RESERVED + num_tasks,
        num_symbols=num_symbols,
        family_params=_family_params(family, num_symbols, rng),
    )


def generate_task_suite(
    num_tasks: int,
    category_mix: dict | None = None,
    seed: int = 0,
    num_symbols: int = DEFAULT_NUM_SYMBOLS,
    families: dict | None = None,
) -> list[TaskSpec]:
    """Deterministic suite; ``families`` optionally narrows the family pool per category."""
    if num_tasks < 1:
        raise ConfigurationError("at least one task is required")
    mix = normalize_mix(category_mix if category_mix is not None else DEFAULT_CATEGORY_MIX)
    counts = apportion(num_tasks, mix)
    rng = _rng(seed, _STREAM_SPEC)
    families = {CATEGORY_ALIASES.get(k, k): v for k, v in (families or {}).items()}
    categories = [c for c in CATEGORIES for _ in range(counts[c])]
    suite = []
    for index, cat in enumerate(categories):
        choices = families.get(cat, CATEGORY_FAMILIES[cat])
        family = choices[int(rng.integers(len(choices)))]
        suite.append(make_task(index, cat, family, num_tasks, seed, num_symbols))
    return suite


def _random_input(task: TaskSpec, rng: np.random.Generator) -> tuple[int, ...]:
    lo, hi = task.input_len
    n = int(rng.integers(lo, hi + 1))
    alphabet = task.alphabet()
    return tuple(int(alphabet[i]) for i in rng.integers(len(alphabet), size=n))


def sample_few_shot(task: TaskSpec, seed: int, max_attempts: int = 100_000) -> FewShotSplit:
    """Draw disjoint train/test sets of ``task.shots`` examples each."""
    rng = _rng(seed, _STREAM_SPLIT, _task_key(task.task_id))
    need = 2 * task.shots
    seen: set[tuple[int, ...]] = set()
    inputs: list[tuple[int, ...]] = []
    attempts = 0
    while len(inputs) < need:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigurationError(f"input space of task {task.task_id} too small for {need} unique examples")
        x = _random_input(task, rng)
        if x in seen:
            continue
        seen.add(x)
        inputs.append(x)
    examples = [Example(task.task_id, x, tuple(task.apply(x))) for x in inputs]
    return FewShotSplit(task.task_id, tuple(examples[: task.shots]), tuple(examples[task.shots:]), seed)


def assign_clients(tasks: Sequence[TaskSpec], num_clients: int, seed: int) -> ClientAssignment:
    if num_clients < 1:
        raise ConfigurationError("num_clients must be positive")
    if num_clients > len(tasks):
        raise ConfigurationError(f"{num_clients} clients but only {len(tasks)} tasks")
    order = _rng(seed, _STREAM_ASSIGN).permutation(len(tasks))
    mapping = {tasks[int(i)].task_id: pos % num_clients for pos, i in enumerate(order)}
    # keep manifest order for stable serialization
    return ClientAssignment(num_clients, {t.task_id: mapping[t.task_id] for t in tasks})


def format_prompt(task: TaskSpec, tokens: Sequence[int]) -> list[int]:
    """``<task name> : <x> [SEP]`` as token ids."""
    if len(tokens) == 0:
        raise ValueError("prompt input must be non-empty")
    tokens = [int(t) for t in tokens]
    reserved = [t for t in tokens if t < task.symbol_offset or t >= task.vocab_size]
    if reserved:
        raise ValueError(f"input contains reserved or out-of-range ids {reserved}")
    return [task.name_token, COLON, *tokens, SEP]


# --- file formats -----------------------------------------------------------

def write_manifest(suite: Sequence[TaskSpec], path, assignment: ClientAssignment | None = None) -> None:
    doc = {"format": "fewfed-suite/1", "tasks": [t.to_dict() for t in suite]}
    if assignment is not None:
        doc["assignment"] = {"num_clients": assignment.num_clients, "mapping": assignment.mapping}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[list[TaskSpec], ClientAssignment | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    suite = [TaskSpec.from_dict(d) for d in doc["tasks"]]
    assignment = None
    if "assignment" in doc:
        a = doc["assignment"]
        assignment = ClientAssignment(a["num_clients"], {k: int(v) for k, v in a["mapping"].items()})
    return suite, assignment


def write_examples(examples: Iterable[Example], suite: Sequence[TaskSpec], path) -> None:
    cats = {t.task_id: t.category for t in suite}
    lines = []
    for ex in examples:
        lines.append("\t".join([
            ex.task_id,
            cats[ex.task_id],
            " ".join(str(t) for t in ex.input),
            " ".join(str(t) for t in ex.target),
        ]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_examples(path) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        task_id, _category, xs, ys = parts
        out.append(Example(task_id, tuple(int(t) for t in xs.split()), tuple(int(t) for t in ys.split())))
    return out
