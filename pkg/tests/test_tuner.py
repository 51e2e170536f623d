from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from tlbench.modelzoo import ModelSpec
from tlbench.tuner import (
    REPORTED_OPTIMUM,
    SearchSpace,
    hyperband_schedule,
    run_search,
    spec_for,
)

from .oracles import hyperband_brackets


def unimodal(config, epochs):
    # peak at dropout 0.3, lr 1e-4; more epochs help a little
    d = (config["dropout_rate"] - 0.3) ** 2
    lr = (math.log10(config["learning_rate"]) + 4) ** 2
    return 1.0 / (1.0 + d + lr) * (0.9 + 0.1 * epochs / 30)


# -- schedule ---------------------------------------------------------------------


@pytest.mark.parametrize("R,eta", [(30, 3), (81, 3), (27, 3), (16, 2), (100, 4), (1, 3), (2, 2)])
def test_schedule_matches_recurrence_oracle(R, eta):
    ours = [(b.s, [(r.n, r.resource) for r in b.rungs]) for b in hyperband_schedule(R, eta)]
    oracle = hyperband_brackets(R, eta)
    assert [s for s, _ in ours] == [s for s, _ in oracle]
    for (_, rungs), (_, expected) in zip(ours, oracle):
        assert [n for n, _ in rungs] == [n for n, _ in expected]
        for (_, r), (_, exact) in zip(rungs, expected):
            assert math.isclose(r, float(exact), rel_tol=1e-12)


def test_schedule_30_3():
    table = hyperband_schedule(30, 3)
    assert [b.s for b in table] == [3, 2, 1, 0]
    assert [[r.n for r in b.rungs] for b in table] == [[27, 9, 3, 1], [12, 4, 1], [6, 2], [4]]
    assert [[r.epochs for r in b.rungs] for b in table] == [[1, 3, 10, 30], [3, 10, 30], [10, 30],
                                                             [30]]


def test_degenerate_budget_single_rung():
    table = hyperband_schedule(1, 3)
    assert len(table) == 1 and len(table[0].rungs) == 1
    assert table[0].rungs[0].epochs == 1


def test_bracket_budgets_near_total():
    R = 30
    table = hyperband_schedule(R, 3)
    B = len(table) * R
    for b in table:
        assert abs(b.budget - B) <= R
        assert all(r.epochs <= R for r in b.rungs)


@pytest.mark.parametrize("kwargs", [{"max_epochs": 0}, {"eta": 1}])
def test_schedule_preconditions(kwargs):
    with pytest.raises(ValueError):
        hyperband_schedule(**kwargs)


# -- search -----------------------------------------------------------------------


def test_search_returns_argmax_over_sampled_configs():
    best, trials = run_search(SearchSpace(), unimodal, seed=3)
    # exhaustive oracle over every (config, budget) pair that was evaluated
    oracle = max(trials, key=lambda t: (unimodal(t.config, t.epochs_allotted), -t.trial_id))
    assert best == oracle.config


def test_sampled_configs_lie_in_space(rng):
    for continuous in (True, False):
        space = SearchSpace(continuous=continuous)
        for _ in range(200):
            assert space.contains(space.sample(rng))


def test_discrete_mode_stays_on_grid(rng):
    space = SearchSpace(continuous=False)
    seen = {space.sample(rng)["learning_rate"] for _ in range(300)}
    assert seen == {1e-5, 5e-5, 1e-4}


def test_singleton_space_runs_one_trial():
    space = SearchSpace(dropout_rate=(0.3,), dense_units=(128,), freeze_rate=(0.2,),
                        optimizer=("adam",), learning_rate_range=(1e-4, 1e-4),
                        weight_decay_range=(1e-5, 1e-5))
    best, trials = run_search(space, unimodal, seed=0)
    assert len(trials) == 1 and trials[0].epochs_allotted == 30
    assert best == {"dropout_rate": 0.3, "dense_units": 128, "freeze_rate": 0.2,
                    "optimizer": "adam", "learning_rate": 1e-4, "weight_decay": 1e-5}


def test_failed_trial_is_minus_inf_and_search_continues():
    calls = {"n": 0}

    def flaky(config, epochs):
        calls["n"] += 1
        if calls["n"] % 5 == 0:
            raise RuntimeError("boom")
        return unimodal(config, epochs)

    best, trials = run_search(SearchSpace(), flaky, schedule=hyperband_schedule(9, 3), seed=1)
    failed = [t for t in trials if t.failed]
    assert failed and all(t.objective == -math.inf and "boom" in t.error for t in failed)
    assert not math.isinf(max(t.objective for t in trials))


def test_promotion_keeps_top_trials_with_ties_to_lower_id():
    # coarse objective produces many ties
    def coarse(config, epochs):
        return round(config["dropout_rate"], 1)

    schedule = hyperband_schedule(30, 3)
    _, trials = run_search(SearchSpace(), coarse, schedule=schedule, seed=7)
    for bracket in schedule:
        rows = [t for t in trials if t.bracket == bracket.s]
        for i in range(len(bracket.rungs) - 1):
            here = [t for t in rows if t.rung == i]
            nxt = [t for t in rows if t.rung == i + 1]
            ranked = sorted(here, key=lambda t: (-t.objective, t.trial_id))
            expected = [t.config for t in ranked[: bracket.rungs[i + 1].n]]
            assert [t.config for t in nxt] == expected


def test_no_trial_exceeds_max_epochs():
    def honest(config, epochs):
        return unimodal(config, epochs), max(1, epochs - 1)

    _, trials = run_search(SearchSpace(), honest, seed=2)
    assert all(t.epochs_run <= t.epochs_allotted <= 30 for t in trials)
    assert all(0.0 <= t.objective <= 1.0 for t in trials)


def test_search_is_deterministic_per_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_search(SearchSpace(), unimodal, seed=5, tuning_dir=a)
    run_search(SearchSpace(), unimodal, seed=5, tuning_dir=b, workers=4)
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_text() == (b / name).read_text()
    _, other = run_search(SearchSpace(), unimodal, seed=6)
    first = json.loads((a / "trial_0000.json").read_text())
    assert first["config"] != other[0].config


def test_tuning_directory_contents(tmp_path):
    _, trials = run_search(SearchSpace(), unimodal, schedule=hyperband_schedule(9, 3), seed=4,
                           tuning_dir=tmp_path)
    logs = sorted(tmp_path.glob("trial_*.json"))
    assert len(logs) == len(trials)
    rec = json.loads(logs[0].read_text())
    assert {"config", "bracket", "rung", "epochs_run", "objective"} <= rec.keys()
    with (tmp_path / "leaderboard.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(trials)
    objs = [float(r["objective"]) for r in rows]
    assert objs == sorted(objs, reverse=True)


def test_reported_optimum_fixture_applies_to_spec():
    assert REPORTED_OPTIMUM == {"dropout_rate": 0.3, "dense_units": 128,
                                "learning_rate": 3.7758e-4, "weight_decay": 7.4855e-5}
    config = {**REPORTED_OPTIMUM, "freeze_rate": 0.2, "optimizer": "adam_decoupled_wd"}
    spec = spec_for(config, ModelSpec())
    assert spec.head.dense_units == 128 and spec.head.dropout_rate == 0.3
    assert spec.optimizer.learning_rate == 3.7758e-4
    assert np.isclose(spec.optimizer.weight_decay, 7.4855e-5)
