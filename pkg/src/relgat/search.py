"""Random hyperparameter search with resumable trial records.

A search space is an ordered mapping of names to priors. Configurations are
sampled with an independent generator per trial, seeded from (master_seed,
trial_id), so any subset of trials can be reproduced without running the
others. Results append to a JSONL file, one fsynced line per trial, and a
rerun skips trial ids already present.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import GraphTask, NodeTask, Split, parse_dataset, serialize_dataset
from .models import (
    GraphClassifier,
    GraphClassifierConfig,
    NodeClassifier,
    NodeClassifierConfig,
    config_hash,
)
from .training import DivergenceError, TrainConfig, kfold_split, train

__all__ = [
    "LogUniform",
    "MultiplesOf",
    "OneOf",
    "Uniform",
    "best_trial",
    "inductive_space",
    "load_space",
    "run_sweep",
    "sample_config",
    "save_space",
    "transductive_space",
    "trial_seeds",
]


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("need low < high")

    def sample(self, rng: np.random.Generator):
        return float(rng.uniform(self.low, self.high))

    def contains(self, value) -> bool:
        return isinstance(value, (int, float)) and self.low <= value <= self.high

    def to_dict(self) -> dict:
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValueError("need 0 < low < high")

    def sample(self, rng: np.random.Generator):
        return float(np.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def contains(self, value) -> bool:
        return isinstance(value, (int, float)) and self.low <= value <= self.high

    def to_dict(self) -> dict:
        return {"kind": "log_uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class OneOf:
    options: tuple

    def __init__(self, *options):
        if len(options) == 1 and isinstance(options[0], (tuple, list)):
            options = tuple(options[0])
        if not options:
            raise ValueError("need at least one option")
        object.__setattr__(self, "options", tuple(options))

    def sample(self, rng: np.random.Generator):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, value) -> bool:
        return value in self.options

    def to_dict(self) -> dict:
        return {"kind": "one_of", "options": list(self.options)}


@dataclass(frozen=True)
class MultiplesOf:
    """Uniform over low, low+step, ..., capped at high."""

    step: int
    low: int
    high: int

    def __post_init__(self):
        if self.step < 1 or self.low < self.step or self.high < self.low:
            raise ValueError("need step >= 1 and step <= low <= high")
        if self.low % self.step or self.high % self.step:
            raise ValueError("bounds must be multiples of the step")

    @property
    def options(self) -> tuple[int, ...]:
        return tuple(range(self.low, self.high + 1, self.step))

    def sample(self, rng: np.random.Generator):
        opts = self.options
        return int(opts[int(rng.integers(len(opts)))])

    def contains(self, value) -> bool:
        return value in self.options

    def to_dict(self) -> dict:
        return {"kind": "multiples_of", "step": self.step, "low": self.low, "high": self.high}


_LEGACY_STEPS = {"multiples_of_four": 4, "multiples_of_eight": 8}


def _prior_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(d["low"], d["high"])
    if kind == "log_uniform":
        return LogUniform(d["low"], d["high"])
    if kind == "one_of":
        return OneOf(*[tuple(o) if isinstance(o, list) else o for o in d["options"]])
    if kind == "multiples_of":
        return MultiplesOf(d["step"], d["low"], d["high"])
    if kind in _LEGACY_STEPS:
        return MultiplesOf(_LEGACY_STEPS[kind], d["low"], d["high"])
    raise ValueError(f"unknown prior kind {kind!r}")


def save_space(space: dict, path) -> None:
    doc = {name: prior.to_dict() for name, prior in space.items()}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_space(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return {name: _prior_from_dict(d) for name, d in doc.items()}


def sample_config(space: dict, rng: np.random.Generator) -> dict:
    """One draw per prior, in the space's declaration order."""
    return {name: prior.sample(rng) for name, prior in space.items()}


def transductive_space() -> dict:
    return {
        "hidden_units": MultiplesOf(4, 4, 20),
        "heads": OneOf(1, 2, 4),
        "feature_dropout": Uniform(0.0, 0.8),
        "edge_dropout": Uniform(0.0, 0.8),
        "basis_w": OneOf(None, 5, 10, 20, 30),
        "basis_a": OneOf(None, 5, 10, 20, 30),
        "l2_layer1_w": LogUniform(1e-6, 1e-1),
        "l2_layer1_a": LogUniform(1e-6, 1e-1),
        "l2_layer2_w": LogUniform(1e-6, 1e-1),
        "l2_layer2_a": LogUniform(1e-6, 1e-1),
        "learning_rate": LogUniform(1e-5, 1e-1),
        "use_bias": OneOf(True, False),
    }


def inductive_space() -> dict:
    return {
        "graph_units": MultiplesOf(8, 32, 128),
        "dense_units": MultiplesOf(8, 32, 128),
        "heads": OneOf(1, 2, 4, 8),
        "feature_dropout": Uniform(0.0, 0.8),
        "edge_dropout": Uniform(0.0, 0.8),
        "l2_layer1_w": LogUniform(1e-6, 1e-1),
        "l2_layer1_a": LogUniform(1e-6, 1e-1),
        "l2_layer2_w": LogUniform(1e-6, 1e-1),
        "l2_layer2_a": LogUniform(1e-6, 1e-1),
        "learning_rate": LogUniform(1e-5, 1e-1),
        "use_bias": OneOf(True, False),
    }


def trial_seeds(master_seed: int, trial_id: int) -> tuple[int, int, int]:
    """(sample, model, train) seeds derived from the master seed and trial
    id; independent of every other trial."""
    state = np.random.SeedSequence([master_seed, trial_id]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def _l2_from_config(config: dict) -> dict[str, float]:
    out = {}
    for group in ("layer1_w", "layer1_a", "layer2_w", "layer2_a"):
        key = f"l2_{group}"
        if key in config:
            out[group] = float(config[key])
    return out


def _train_config(config: dict, train_seed: int, overrides: dict | None) -> TrainConfig:
    kwargs = {
        "learning_rate": float(config.get("learning_rate", 0.01)),
        "feature_dropout": float(config.get("feature_dropout", 0.0)),
        "edge_dropout": float(config.get("edge_dropout", 0.0)),
        "l2": _l2_from_config(config),
        "seed": train_seed,
    }
    if "batch_size" in config:
        kwargs["batch_size"] = int(config["batch_size"])
    if overrides:
        kwargs.update(overrides)
    return TrainConfig(**kwargs)


def _run_trial(payload: dict) -> dict:
    """Executes one trial; importable at module top level so process pools
    can pickle it."""
    trial_id = payload["trial"]
    master_seed = payload["master_seed"]
    space = {name: _prior_from_dict(d) for name, d in payload["space"].items()}
    sample_seed, model_seed, train_seed = trial_seeds(master_seed, trial_id)
    config = sample_config(space, np.random.default_rng(sample_seed))
    task = parse_dataset(payload["dataset"])
    variant = payload["variant"]
    overrides = payload.get("overrides")
    folds = payload.get("folds")
    fold_limit = payload.get("fold_limit")

    record = {
        "trial": trial_id,
        "seed": train_seed,
        "config": config,
        "config_hash": config_hash(config),
        "variant": variant,
        "status": "ok",
    }
    try:
        if isinstance(task, NodeTask):
            objective, metrics = _node_objective(
                task, config, variant, model_seed, train_seed, overrides
            )
        else:
            objective, metrics = _graph_objective(
                task, config, variant, model_seed, train_seed, overrides, folds, fold_limit
            )
        record["objective"] = objective
        record["metrics"] = metrics
    except DivergenceError as exc:
        record["status"] = "diverged"
        record["objective"] = None
        record["error"] = str(exc)
    return record


def _node_objective(task, config, variant, model_seed, train_seed, overrides):
    graph = task.graph
    num_classes = task.labels.num_classes
    mcfg = NodeClassifierConfig(
        in_dim=graph.feature_dim,
        num_relations=graph.num_relations,
        num_classes=num_classes,
        hidden_units=int(config.get("hidden_units", 16)),
        heads=int(config.get("heads", 1)),
        logit_mode=variant["logit_mode"],
        norm_kind=variant["norm_kind"],
        basis_w=config.get("basis_w"),
        basis_a=config.get("basis_a"),
        use_bias=bool(config.get("use_bias", True)),
        one_hot=graph.one_hot_features,
    )
    model = NodeClassifier(np.random.default_rng(model_seed), mcfg)
    result = train(model, task, _train_config(config, train_seed, overrides))
    return result.best_metric, {
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "val_accuracy": result.best_metric,
    }


def _graph_objective(task, config, variant, model_seed, train_seed, overrides, folds, fold_limit):
    graph0 = task.graphs[0]
    num_classes = task.labels.num_classes
    mcfg = GraphClassifierConfig(
        feature_dim=graph0.feature_dim,
        num_relations=graph0.num_relations,
        num_tasks=task.labels.graph_classes.shape[1],
        num_classes=num_classes,
        graph_units=int(config.get("graph_units", 32)),
        dense_units=int(config.get("dense_units", 64)),
        heads=int(config.get("heads", 1)),
        logit_mode=variant["logit_mode"],
        norm_kind=variant["norm_kind"],
        use_bias=bool(config.get("use_bias", True)),
    )
    tcfg = _train_config(config, train_seed, overrides)
    if not folds:
        model = GraphClassifier(np.random.default_rng(model_seed), mcfg)
        result = train(model, task, tcfg)
        return result.best_metric, {
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
            "val_metric": result.best_metric,
        }

    pool = np.sort(
        np.concatenate(
            [
                np.asarray(task.split.train, dtype=np.int64),
                np.asarray(task.split.validation, dtype=np.int64),
            ]
        )
    )
    assignments = kfold_split(pool.size, folds, train_seed)
    limit = folds if fold_limit is None else min(fold_limit, folds)
    fold_metrics = []
    for i in range(limit):
        tr, va = assignments[i]
        split = Split(
            train=tuple(int(v) for v in pool[tr]),
            validation=tuple(int(v) for v in pool[va]),
            test=tuple(task.split.test),
        )
        fold_task = GraphTask(task.graphs, task.labels, split)
        model = GraphClassifier(np.random.default_rng(model_seed), mcfg)
        result = train(model, fold_task, tcfg)
        fold_metrics.append(result.best_metric)
    return float(np.mean(fold_metrics)), {
        "fold_metrics": fold_metrics,
        "folds_run": limit,
    }


def _completed_trials(path: Path) -> set[int]:
    done = set()
    if path.exists():
        for line in path.read_text().splitlines():
            line = line.strip()
            if line:
                done.add(json.loads(line)["trial"])
    return done


def _append_record(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def run_sweep(
    task,
    space: dict,
    num_trials: int,
    master_seed: int,
    record_path,
    *,
    logit_mode: str = "additive",
    norm_kind: str = "wirgat",
    parallelism: int = 1,
    overrides: dict | None = None,
    folds: int | None = None,
    fold_limit: int | None = None,
) -> list[dict]:
    """Runs (or resumes) a random search and returns all records in trial
    order. Trials already present in record_path are not recomputed."""
    if num_trials < 1:
        raise ValueError("need at least one trial")
    if parallelism < 1:
        raise ValueError("parallelism must be positive")
    path = Path(record_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    done = _completed_trials(path)
    pending = [i for i in range(num_trials) if i not in done]
    dataset = serialize_dataset(task)
    payloads = [
        {
            "trial": i,
            "master_seed": master_seed,
            "space": {name: prior.to_dict() for name, prior in space.items()},
            "dataset": dataset,
            "variant": {"logit_mode": logit_mode, "norm_kind": norm_kind},
            "overrides": overrides,
            "folds": folds,
            "fold_limit": fold_limit,
        }
        for i in pending
    ]
    if parallelism == 1:
        for payload in payloads:
            _append_record(path, _run_trial(payload))
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_trial, p) for p in payloads]
            for fut in as_completed(futures):
                _append_record(path, fut.result())

    records = [
        json.loads(line)
        for line in path.read_text().splitlines()
        if line.strip()
    ]
    records.sort(key=lambda r: r["trial"])
    return records


def best_trial(records: list[dict]) -> dict:
    """Highest-objective successful trial."""
    ok = [r for r in records if r.get("status") == "ok" and r.get("objective") is not None]
    if not ok:
        raise ValueError("no successful trials")
    return max(ok, key=lambda r: r["objective"])
