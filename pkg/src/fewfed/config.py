"""Run configuration: YAML loading, defaults, overrides and validation."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .federation import STRATEGIES, TrainConfig
from .metrics import DEFAULT_TIE_EPS
from .tasks import CATEGORY_ALIASES, DEFAULT_NUM_SYMBOLS, FAMILIES, normalize_mix
from .weighting import EnergyConfig

SEED_ENV = "FEWFED_SEED"


@dataclass(frozen=True)
class RunConfig:
    num_clients: int = 4
    tasks_per_client: int = 5
    total_tasks: int | None = None  # wins over tasks_per_client when set
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 8
    lr: float = 0.05
    energy: dict = field(default_factory=lambda: EnergyConfig().to_dict())
    strategy: str = "fewfedweight"
    seeds: tuple = (0, 1, 2, 3, 4)
    tie_eps: float = DEFAULT_TIE_EPS
    model: dict = field(default_factory=lambda: {"d": 32, "init_scale": 0.1})
    num_symbols: int = DEFAULT_NUM_SYMBOLS
    category_mix: dict | None = None  # None -> the default 45/41/5/27 mix
    families: dict | None = None
    ditto_lambda: float = 1.0
    switch_round: int | None = None
    out: str = "runs"

    @property
    def num_tasks(self) -> int:
        return self.total_tasks if self.total_tasks is not None else self.tasks_per_client * self.num_clients

    def energy_config(self) -> EnergyConfig:
        return EnergyConfig(**self.energy)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            d=self.model["d"],
            init_scale=self.model["init_scale"],
            ditto_lambda=self.ditto_lambda,
            energy=self.energy_config(),
            switch_round=self.switch_round,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


_FIELD_TYPES = {
    "num_clients": int, "tasks_per_client": int, "total_tasks": (int, type(None)), "rounds": int,
    "local_epochs": int, "batch_size": int, "lr": (int, float), "energy": dict, "strategy": str,
    "seeds": (list, tuple), "tie_eps": (int, float), "model": dict, "num_symbols": int,
    "category_mix": (dict, type(None)), "families": (dict, type(None)), "ditto_lambda": (int, float),
    "switch_round": (int, type(None)), "out": str,
}


def _type_ok(value, expected) -> bool:
    if isinstance(value, bool):
        return False
    return isinstance(value, expected)


def _problems(raw: dict) -> list[str]:
    problems = []
    names = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in names:
            problems.append(f"unknown key: {key}")
    bad_type = set()
    for key, value in raw.items():
        if key in _FIELD_TYPES and not _type_ok(value, _FIELD_TYPES[key]):
            problems.append(f"{key}: expected {_type_name(_FIELD_TYPES[key])}, got {type(value).__name__}")
            bad_type.add(key)
    # range checks only look at keys whose type was right
    raw = {k: v for k, v in raw.items() if k in names and k not in bad_type}

    def positive(name, allow_zero=False):
        v = raw.get(name)
        if v is None:
            return
        if v < 0 or (v == 0 and not allow_zero):
            problems.append(f"{name}: must be {'>= 0' if allow_zero else '> 0'}, got {v}")

    for name in ("num_clients", "tasks_per_client", "total_tasks", "batch_size", "lr", "num_symbols"):
        positive(name)
    for name in ("rounds", "local_epochs", "tie_eps", "ditto_lambda", "switch_round"):
        positive(name, allow_zero=True)
    if "strategy" in raw and raw["strategy"] not in STRATEGIES:
        problems.append(f"strategy: unknown {raw['strategy']!r}, choose from {sorted(STRATEGIES)}")
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not seeds:
            problems.append("seeds: must be non-empty")
        elif not all(_type_ok(s, int) for s in seeds):
            problems.append("seeds: must be integers")
    if "energy" in raw:
        problems.extend(_energy_problems(raw["energy"]))
    if "model" in raw:
        model = raw["model"]
        for k in model:
            if k not in ("d", "init_scale"):
                problems.append(f"unknown key: model.{k}")
        if "d" in model and (not _type_ok(model["d"], int) or model["d"] < 1):
            problems.append(f"model.d: must be a positive integer, got {model['d']!r}")
        if "init_scale" in model and (not _type_ok(model["init_scale"], (int, float)) or model["init_scale"] <= 0):
            problems.append(f"model.init_scale: must be > 0, got {model['init_scale']!r}")
    if raw.get("category_mix") is not None:
        try:
            normalize_mix(raw["category_mix"])
        except ConfigurationError as e:
            problems.append(f"category_mix: {e}")
    if raw.get("families") is not None:
        for cat, fams in raw["families"].items():
            if CATEGORY_ALIASES.get(cat, cat) not in ("classification", "qa", "conditional_generation", "other"):
                problems.append(f"families: unknown category {cat!r}")
            bad = [f for f in (fams or []) if f not in FAMILIES]
            if not fams or bad:
                problems.append(f"families.{cat}: unknown or empty families {bad or fams!r}")
    return problems


def _energy_problems(energy: dict) -> list[str]:
    problems = []
    allowed = {"temperature": (int, float), "top_k": int, "weight_floor": (int, float)}
    for k, v in energy.items():
        if k not in allowed:
            problems.append(f"unknown key: energy.{k}")
        elif not _type_ok(v, allowed[k]):
            problems.append(f"energy.{k}: expected {_type_name(allowed[k])}, got {type(v).__name__}")
        elif v <= 0:
            problems.append(f"energy.{k}: must be > 0, got {v}")
    return problems


def _type_name(expected) -> str:
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected if t is not type(None))
    return expected.__name__


def _build(raw: dict) -> RunConfig:
    problems = _problems(raw)
    if problems:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems))
    merged = dict(raw)
    merged["energy"] = {**EnergyConfig().to_dict(), **raw.get("energy", {})}
    merged["model"] = {"d": 32, "init_scale": 0.1, **raw.get("model", {})}
    if "seeds" in merged:
        merged["seeds"] = tuple(int(s) for s in merged["seeds"])
    for name in ("lr", "tie_eps", "ditto_lambda"):
        if name in merged:
            merged[name] = float(merged[name])
    merged["energy"]["temperature"] = float(merged["energy"]["temperature"])
    merged["energy"]["weight_floor"] = float(merged["energy"]["weight_floor"])
    merged["model"]["init_scale"] = float(merged["model"]["init_scale"])
    cfg = RunConfig(**merged)
    try:
        cfg.train_config().validate()
    except ConfigurationError as e:
        raise ConfigurationError(f"invalid configuration:\n  {e}") from None
    return cfg


def shift_seeds(seeds, master: int) -> tuple:
    """Re-anchor a seed list at ``master``, keeping its length."""
    return tuple(master + i for i in range(len(seeds)))


def load_config(path=None, env=None, **overrides) -> RunConfig:
    """Read YAML at ``path`` (or nothing), apply defaults, then overrides.

    ``seed`` in overrides or ``FEWFED_SEED`` in ``env`` replace the seed list
    with consecutive seeds starting at that value; the command-line seed wins.
    """
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigurationError(f"config file does not parse: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a mapping at top level")
        raw.update(loaded)

    env = os.environ if env is None else env
    master = overrides.pop("seed", None)
    if master is None and env.get(SEED_ENV):
        try:
            master = int(env[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = _build(raw)
    if master is not None:
        cfg = replace(cfg, seeds=shift_seeds(cfg.seeds, int(master)))
    return cfg
