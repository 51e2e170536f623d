"""Hyperband search over head, optimizer and freeze-rate hyperparameters."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .modelzoo import ModelSpec, OptimizerSpec, build_from_spec
from .pipeline.batching import BatchStream
from .trainer import TrainConfig, set_global_seed, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchSpace:
    dropout_rate: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5)
    dense_units: tuple[int, ...] = (32, 64, 128, 256, 512)
    learning_rate: tuple[float, ...] = (1e-5, 5e-5, 1e-4)
    weight_decay: tuple[float, ...] = (1e-5, 1e-4)
    freeze_rate: tuple[float, ...] = (0.01, 0.05, 0.10, 0.20, 0.50, 0.75)
    optimizer: tuple[str, ...] = ("sgd", "rmsprop", "adam", "nadam", "adam_decoupled_wd")
    # log-uniform ranges used instead of the grids above when continuous=True
    continuous: bool = True
    learning_rate_range: tuple[float, float] = (1e-5, 1e-3)
    weight_decay_range: tuple[float, float] = (1e-5, 1e-4)

    _CHOICES = ("dropout_rate", "dense_units", "freeze_rate", "optimizer")

    def __post_init__(self):
        for name in self._CHOICES + ("learning_rate", "weight_decay"):
            if not getattr(self, name):
                raise ValueError(f"search dimension {name!r} is empty")
        for name in ("learning_rate_range", "weight_decay_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")

    def sample(self, rng: np.random.Generator) -> dict:
        config = {name: _pick(getattr(self, name), rng) for name in self._CHOICES}
        if self.continuous:
            config["learning_rate"] = _log_uniform(self.learning_rate_range, rng)
            config["weight_decay"] = _log_uniform(self.weight_decay_range, rng)
        else:
            config["learning_rate"] = _pick(self.learning_rate, rng)
            config["weight_decay"] = _pick(self.weight_decay, rng)
        return config

    def contains(self, config: dict) -> bool:
        if any(config[name] not in getattr(self, name) for name in self._CHOICES):
            return False
        for name in ("learning_rate", "weight_decay"):
            if self.continuous:
                lo, hi = getattr(self, f"{name}_range")
                if not lo <= config[name] <= hi:
                    return False
            elif config[name] not in getattr(self, name):
                return False
        return True

    def is_singleton(self) -> bool:
        sizes = [len(getattr(self, n)) for n in self._CHOICES]
        if self.continuous:
            degenerate = all(lo == hi for lo, hi in (self.learning_rate_range,
                                                    self.weight_decay_range))
        else:
            degenerate = len(self.learning_rate) == 1 and len(self.weight_decay) == 1
        return degenerate and all(s == 1 for s in sizes)


def _pick(options: Sequence, rng: np.random.Generator):
    value = options[int(rng.integers(len(options)))]
    return value.item() if hasattr(value, "item") else value


def _log_uniform(bounds: tuple[float, float], rng: np.random.Generator) -> float:
    lo, hi = bounds
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


@dataclass(frozen=True)
class Rung:
    n: int  # configurations evaluated
    resource: float  # exact Hyperband budget per configuration
    epochs: int  # integer epochs actually granted


@dataclass(frozen=True)
class Bracket:
    s: int
    rungs: tuple[Rung, ...]

    @property
    def budget(self) -> float:
        return sum(r.n * r.resource for r in self.rungs)


def _max_power(r: int, eta: int) -> int:
    """Largest s with eta**s <= r (floor of log base eta, in integers)."""
    s = 0
    while eta ** (s + 1) <= r:
        s += 1
    return s


def hyperband_schedule(max_epochs: int = 30, eta: int = 3) -> list[Bracket]:
    """Bracket table for Hyperband with maximum budget ``max_epochs``.

    With s_max = floor(log_eta R) there are s_max + 1 brackets. Bracket s
    starts n = ceil((s_max + 1) eta^s / (s + 1)) configurations at
    r = R eta^-s epochs; rung i keeps floor(n eta^-i) of them at r eta^i.
    """
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    if eta < 2:
        raise ValueError("eta must be >= 2")
    s_max = _max_power(max_epochs, eta)
    brackets = []
    for s in range(s_max, -1, -1):
        n = -(-((s_max + 1) * eta**s) // (s + 1))
        rungs = []
        for i in range(s + 1):
            n_i = n // eta**i
            resource = max_epochs * eta ** (i - s)
            epochs = min(max_epochs, max(1, round(resource)))
            rungs.append(Rung(n_i, resource, epochs))
        brackets.append(Bracket(s, tuple(rungs)))
    return brackets


@dataclass
class TrialResult:
    trial_id: int
    config: dict
    bracket: int
    rung: int
    epochs_allotted: int
    epochs_run: int
    objective: float
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.objective):
            d["objective"] = "-inf"
        return d


Objective = Callable[[dict, int], "float | tuple[float, int]"]


def _run_trial(objective: Objective, config: dict, epochs: int) -> tuple[float, int, str | None]:
    try:
        out = objective(config, epochs)
    except Exception as exc:  # a crashed trial must not end the search
        log.warning("trial failed for %s: %s", config, exc)
        return -math.inf, 0, f"{type(exc).__name__}: {exc}"
    if isinstance(out, tuple):
        value, run = out
    else:
        value, run = out, epochs
    return float(value), int(run), None


def _promote(results: Sequence[TrialResult], k: int) -> list[TrialResult]:
    ranked = sorted(results, key=lambda t: (-t.objective, t.trial_id))
    return ranked[:k]


def run_search(
    space: SearchSpace,
    objective: Objective,
    schedule: Sequence[Bracket] | None = None,
    seed: int = 42,
    tuning_dir: str | Path | None = None,
    workers: int = 1,
) -> tuple[dict, list[TrialResult]]:
    """Successive halving inside every bracket of ``schedule``.

    ``objective(config, epochs)`` returns the trial's objective (higher is
    better), optionally paired with the epochs actually run. After each rung
    the best ``n`` of the next rung are promoted, ties going to the earlier
    trial. Trials that raise are logged as failed with objective -inf.
    """
    schedule = list(schedule if schedule is not None else hyperband_schedule())
    if space.is_singleton():
        top = schedule[-1]
        schedule = [Bracket(top.s, (replace(top.rungs[-1], n=1),))]
    rng = np.random.default_rng(seed)
    out_dir = Path(tuning_dir) if tuning_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    trials: list[TrialResult] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for bracket in schedule:
            configs = [space.sample(rng) for _ in range(bracket.rungs[0].n)]
            for i, rung in enumerate(bracket.rungs):
                if pool is not None:
                    outcomes = list(pool.map(lambda c: _run_trial(objective, c, rung.epochs), configs))
                else:
                    outcomes = [_run_trial(objective, c, rung.epochs) for c in configs]
                results = []
                for config, (value, run, error) in zip(configs, outcomes):
                    t = TrialResult(len(trials), config, bracket.s, i, rung.epochs, run, value,
                                    failed=error is not None, error=error)
                    trials.append(t)
                    results.append(t)
                    if out_dir:
                        (out_dir / f"trial_{t.trial_id:04}.json").write_text(
                            json.dumps(t.to_dict(), indent=2))
                if i + 1 < len(bracket.rungs):
                    configs = [t.config for t in _promote(results, bracket.rungs[i + 1].n)]
    finally:
        if pool is not None:
            pool.shutdown()

    if not trials:
        raise RuntimeError("schedule produced no trials")
    best = _promote(trials, 1)[0]
    if out_dir:
        write_leaderboard(trials, out_dir / "leaderboard.csv")
    return best.config, trials


def write_leaderboard(trials: Sequence[TrialResult], path: str | Path) -> Path:
    keys = ["dropout_rate", "dense_units", "learning_rate", "weight_decay", "freeze_rate",
            "optimizer"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "trial_id", "bracket", "rung", "epochs", "objective", *keys])
        for rank, t in enumerate(_promote(trials, len(trials)), start=1):
            writer.writerow([rank, t.trial_id, t.bracket, t.rung, t.epochs_run,
                             "-inf" if t.failed else repr(t.objective),
                             *(t.config.get(k) for k in keys)])
    return Path(path)


def spec_for(config: dict, base: ModelSpec) -> ModelSpec:
    """ModelSpec obtained by applying a sampled configuration to ``base``."""
    return replace(
        base,
        head=replace(base.head, dropout_rate=config["dropout_rate"],
                     dense_units=config["dense_units"]),
        optimizer=OptimizerSpec(config["optimizer"], config["learning_rate"],
                                config["weight_decay"]),
        freeze_rate=config["freeze_rate"],
    )


def make_training_objective(
    train_stream: BatchStream,
    val_stream: BatchStream,
    base: ModelSpec = ModelSpec(),
    train_config: TrainConfig = TrainConfig(),
) -> Objective:
    """Objective that trains a fresh model and returns its best validation accuracy."""

    def objective(config: dict, epochs: int) -> tuple[float, int]:
        spec = spec_for(config, base)
        set_global_seed(train_config.seed)
        model = build_from_spec(spec)
        cfg = replace(train_config, max_epochs=epochs, checkpoint_dir=None)
        _, history = train(model, train_stream, val_stream, cfg, spec=spec, reseed=False)
        return max(history.column("val_acc")), len(history.rows)

    return objective


# Hyperband optimum reported for DenseNet121; kept as a result-format fixture.
REPORTED_OPTIMUM = {
    "dropout_rate": 0.3,
    "dense_units": 128,
    "learning_rate": 3.7758e-4,
    "weight_decay": 7.4855e-5,
}
