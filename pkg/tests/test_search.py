"""Priors, search-space serialization, and the resumable sweep runner."""

import json

import numpy as np
import pytest

from relgat.graph import GraphTask, LabelSet, Split, generate_planted
from relgat.search import (
    LogUniform,
    MultiplesOf,
    OneOf,
    Uniform,
    best_trial,
    inductive_space,
    load_space,
    run_sweep,
    sample_config,
    save_space,
    transductive_space,
    trial_seeds,
)

RNG = np.random.default_rng


def test_uniform_support_and_determinism():
    prior = Uniform(0.0, 0.8)
    draws = [prior.sample(RNG(0)) for _ in range(5)]
    assert all(prior.contains(d) for d in draws)
    assert draws[0] == Uniform(0.0, 0.8).sample(RNG(0))
    with pytest.raises(ValueError):
        Uniform(1.0, 0.5)


def test_log_uniform_range_and_log_spread():
    prior = LogUniform(1e-5, 1e-1)
    rng = RNG(1)
    draws = np.array([prior.sample(rng) for _ in range(4000)])
    assert draws.min() >= 1e-5 and draws.max() <= 1e-1
    # half the mass below the geometric midpoint
    mid = np.sqrt(1e-5 * 1e-1)
    frac = (draws < mid).mean()
    assert 0.45 < frac < 0.55
    with pytest.raises(ValueError):
        LogUniform(0.0, 1.0)


def test_one_of_uniform_frequencies():
    prior = OneOf(None, 5, 10, 20, 30)
    rng = RNG(2)
    draws = [prior.sample(rng) for _ in range(5000)]
    assert all(prior.contains(d) for d in draws)
    for option in prior.options:
        freq = sum(d == option for d in draws) / 5000
        assert abs(freq - 0.2) < 0.02


def test_multiples_of_options():
    prior = MultiplesOf(4, 4, 20)
    assert prior.options == (4, 8, 12, 16, 20)
    assert all(prior.contains(prior.sample(RNG(i))) for i in range(10))
    assert not prior.contains(6)
    with pytest.raises(ValueError):
        MultiplesOf(4, 4, 18)
    with pytest.raises(ValueError):
        MultiplesOf(8, 4, 16)


def test_space_round_trip():
    space = transductive_space()
    save_space(space, "/tmp/space_test.json")
    back = load_space("/tmp/space_test.json")
    assert list(back) == list(space)
    for name in space:
        assert back[name].to_dict() == space[name].to_dict()


def test_legacy_prior_kind_names_load():
    doc = {
        "hidden_units": {"kind": "multiples_of_four", "low": 4, "high": 20},
        "graph_units": {"kind": "multiples_of_eight", "low": 32, "high": 128},
    }
    json.dump(doc, open("/tmp/space_legacy.json", "w"))
    space = load_space("/tmp/space_legacy.json")
    assert space["hidden_units"].step == 4
    assert space["graph_units"].step == 8


def test_sample_config_types_and_order():
    cfg = sample_config(transductive_space(), RNG(3))
    assert list(cfg) == list(transductive_space())
    assert cfg["hidden_units"] % 4 == 0
    assert cfg["heads"] in (1, 2, 4)
    assert 0.0 <= cfg["feature_dropout"] <= 0.8
    assert cfg["basis_w"] in (None, 5, 10, 20, 30)
    assert isinstance(cfg["use_bias"], bool)
    assert 1e-5 <= cfg["learning_rate"] <= 1e-1
    icfg = sample_config(inductive_space(), RNG(4))
    assert icfg["graph_units"] % 8 == 0 and 32 <= icfg["graph_units"] <= 128
    assert icfg["heads"] in (1, 2, 4, 8)
    assert "basis_w" not in icfg


def test_trial_seeds_deterministic_and_distinct():
    a = trial_seeds(7, 0)
    assert a == trial_seeds(7, 0)
    assert a != trial_seeds(7, 1)
    assert a != trial_seeds(8, 0)
    assert len(set(a)) == 3


def _tiny_task(n_graphs=8):
    pairs = generate_planted(0, n_graphs, 6, 4, feature_dim=3, noise_edges=2)
    graphs = tuple(g for g, _ in pairs)
    labels = LabelSet(
        kind="graph",
        num_classes=2,
        num_tasks=1,
        graph_classes=np.array([[y] for _, y in pairs], dtype=np.int64),
    )
    split = Split(
        train=tuple(range(n_graphs - 4)),
        validation=(n_graphs - 4, n_graphs - 3),
        test=(n_graphs - 2, n_graphs - 1),
    )
    return GraphTask(graphs, labels, split)


_TINY_SPACE = {
    "graph_units": MultiplesOf(8, 8, 16),
    "learning_rate": LogUniform(1e-3, 1e-1),
}


def test_run_sweep_resume_skips_done_trials(tmp_path):
    task = _tiny_task()
    path = tmp_path / "records.jsonl"
    first = run_sweep(
        task, _TINY_SPACE, 2, 11, path, overrides={"epochs": 2, "patience": 2}
    )
    assert [r["trial"] for r in first] == [0, 1]
    text_before = path.read_text()
    second = run_sweep(
        task, _TINY_SPACE, 4, 11, path, overrides={"epochs": 2, "patience": 2}
    )
    assert [r["trial"] for r in second] == [0, 1, 2, 3]
    # the first two lines were not rewritten
    assert second[0] == first[0] and second[1] == first[1]
    assert path.read_text().startswith(text_before)


def test_run_sweep_records_are_reproducible(tmp_path):
    task = _tiny_task()
    a = run_sweep(
        task, _TINY_SPACE, 2, 5, tmp_path / "a.jsonl", overrides={"epochs": 2, "patience": 2}
    )
    b = run_sweep(
        task, _TINY_SPACE, 2, 5, tmp_path / "b.jsonl", overrides={"epochs": 2, "patience": 2}
    )
    assert a == b
    for record in a:
        assert record["status"] == "ok"
        assert set(record) >= {"trial", "seed", "config", "config_hash", "variant", "objective"}
        assert record["variant"] == {"logit_mode": "additive", "norm_kind": "wirgat"}


def test_run_sweep_fold_limit(tmp_path):
    task = _tiny_task(10)
    records = run_sweep(
        task,
        _TINY_SPACE,
        1,
        3,
        tmp_path / "folds.jsonl",
        overrides={"epochs": 2, "patience": 2},
        folds=4,
        fold_limit=2,
    )
    metrics = records[0]["metrics"]
    assert metrics["folds_run"] == 2
    assert len(metrics["fold_metrics"]) == 2
    assert records[0]["objective"] == pytest.approx(
        float(np.mean(metrics["fold_metrics"]))
    )


def test_run_sweep_parallel_matches_serial(tmp_path):
    task = _tiny_task()
    serial = run_sweep(
        task, _TINY_SPACE, 2, 9, tmp_path / "s.jsonl", overrides={"epochs": 2, "patience": 2}
    )
    parallel = run_sweep(
        task,
        _TINY_SPACE,
        2,
        9,
        tmp_path / "p.jsonl",
        parallelism=2,
        overrides={"epochs": 2, "patience": 2},
    )
    assert sorted(json.dumps(r, sort_keys=True) for r in serial) == sorted(
        json.dumps(r, sort_keys=True) for r in parallel
    )


def test_best_trial_ignores_failures():
    records = [
        {"trial": 0, "status": "diverged", "objective": None},
        {"trial": 1, "status": "ok", "objective": 0.4},
        {"trial": 2, "status": "ok", "objective": 0.9},
    ]
    assert best_trial(records)["trial"] == 2
    with pytest.raises(ValueError):
        best_trial([records[0]])
