"""Command line entry points.

Subcommands: gen (synthetic benchmark corpus), train, eval, sweep, stats.
Every artifact embeds the tool version, a hash of the exact configuration,
and the seed, so runs can be traced back to their inputs. Exit codes: 0 on
success, 1 when training diverges, 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .graph import (
    GraphFormatError,
    GraphTask,
    LabelSet,
    NodeTask,
    Split,
    generate_planted,
    parse_dataset,
    serialize_dataset,
)
from .models import (
    GraphClassifier,
    GraphClassifierConfig,
    NodeClassifier,
    NodeClassifierConfig,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)
from .search import (
    best_trial,
    inductive_space,
    load_space,
    run_sweep,
    transductive_space,
)
from .stats import cdf_tables, pairwise_pvalues
from .training import DivergenceError, TrainConfig, evaluate, train

__all__ = ["main"]


def _split_indices(n: int, seed: int, train_frac: float, val_frac: float) -> Split:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    return Split(
        train=tuple(int(i) for i in np.sort(order[:n_train])),
        validation=tuple(int(i) for i in np.sort(order[n_train : n_train + n_val])),
        test=tuple(int(i) for i in np.sort(order[n_train + n_val :])),
    )


def _cmd_gen(args) -> int:
    pairs = generate_planted(
        args.seed,
        args.graphs,
        args.nodes,
        args.relations,
        feature_dim=args.feature_dim,
        noise_edges=args.noise_edges,
    )
    graphs = tuple(g for g, _ in pairs)
    labels = LabelSet(
        kind="graph",
        num_classes=2,
        num_tasks=1,
        graph_classes=np.array([[y] for _, y in pairs], dtype=np.int64),
    )
    split = _split_indices(len(pairs), args.seed, args.train_frac, args.val_frac)
    task = GraphTask(graphs, labels, split)
    doc = json.loads(serialize_dataset(task))
    doc["provenance"] = {
        "tool_version": __version__,
        "seed": args.seed,
        "config_hash": config_hash(
            {
                "graphs": args.graphs,
                "nodes": args.nodes,
                "relations": args.relations,
                "feature_dim": args.feature_dim,
                "noise_edges": args.noise_edges,
                "train_frac": args.train_frac,
                "val_frac": args.val_frac,
            }
        ),
    }
    Path(args.out).write_text(json.dumps(doc, separators=(",", ":")))
    print(f"wrote {args.graphs} graphs to {args.out}")
    return 0


def _build_model(task, args, rng):
    if isinstance(task, NodeTask):
        graph = task.graph
        cfg = NodeClassifierConfig(
            in_dim=graph.feature_dim,
            num_relations=graph.num_relations,
            num_classes=task.labels.num_classes,
            hidden_units=args.hidden_units,
            heads=args.heads,
            logit_mode=args.logit_mode,
            norm_kind=args.norm_kind,
            basis_w=args.basis_w,
            basis_a=args.basis_a,
            use_bias=not args.no_bias,
            one_hot=graph.one_hot_features,
            embed_dim=args.embed_dim if graph.one_hot_features else None,
        )
        return NodeClassifier(rng, cfg), "node"
    graph0 = task.graphs[0]
    cfg = GraphClassifierConfig(
        feature_dim=graph0.feature_dim,
        num_relations=graph0.num_relations,
        num_tasks=task.labels.graph_classes.shape[1],
        num_classes=task.labels.num_classes,
        graph_units=args.graph_units,
        dense_units=args.dense_units,
        heads=args.heads,
        logit_mode=args.logit_mode,
        norm_kind=args.norm_kind,
        use_bias=not args.no_bias,
    )
    return GraphClassifier(rng, cfg), "graph"


def _l2_mapping(args) -> dict[str, float]:
    base = args.l2 or 0.0
    out = {}
    for group in ("layer1_w", "layer1_a", "layer2_w", "layer2_a"):
        value = getattr(args, f"l2_{group}")
        out[group] = base if value is None else value
    return {k: v for k, v in out.items() if v > 0}


def _write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in history:
            epoch = record["epoch"]
            for key, value in record.items():
                if key == "epoch":
                    continue
                split, _, metric = key.partition("_")
                split = {"train": "train", "val": "validation"}[split]
                fh.write(
                    json.dumps(
                        {
                            "trial": 0,
                            "epoch": epoch,
                            "split": split,
                            "metric": metric,
                            "value": value,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


def _cmd_train(args) -> int:
    task = parse_dataset(Path(args.data).read_text())
    model, kind = _build_model(task, args, np.random.default_rng(args.seed))
    tcfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        patience=args.patience,
        batch_size=args.batch_size,
        feature_dropout=args.feature_dropout,
        edge_dropout=args.edge_dropout,
        l2=_l2_mapping(args),
        seed=args.seed,
    )
    result = train(model, task, tcfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_config = model.config.to_dict()
    run_config = {
        "model": model_config,
        "task": kind,
        "train": {
            "learning_rate": tcfg.learning_rate,
            "epochs": tcfg.epochs,
            "patience": tcfg.patience,
            "batch_size": tcfg.batch_size,
            "feature_dropout": tcfg.feature_dropout,
            "edge_dropout": tcfg.edge_dropout,
            "l2": tcfg.l2,
            "seed": tcfg.seed,
        },
    }
    save_checkpoint(
        out,
        model.params,
        run_config,
        extra={"tool_version": __version__, "seed": args.seed, "task": kind},
    )
    _write_metrics(out / "metrics.jsonl", result.history)
    final = {}
    for split in ("train", "validation", "test"):
        if task.split.part(split):
            final[split] = evaluate(model, task, split)
    summary = {
        "tool_version": __version__,
        "config_hash": config_hash(run_config),
        "seed": args.seed,
        "task": kind,
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "final": final,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _rebuild_model(manifest: dict):
    config = manifest["config"]["model"]
    kind = manifest["config"].get("task") or manifest.get("task")
    rng = np.random.default_rng(0)
    if kind == "node":
        return NodeClassifier(rng, NodeClassifierConfig.from_dict(config))
    if kind == "graph":
        return GraphClassifier(rng, GraphClassifierConfig.from_dict(config))
    raise GraphFormatError(f"checkpoint has unknown task kind {kind!r}")


def _cmd_eval(args) -> int:
    task = parse_dataset(Path(args.data).read_text())
    params, manifest = load_checkpoint(args.checkpoint)
    model = _rebuild_model(manifest)
    for name, value in params.items():
        if name not in model.params:
            raise GraphFormatError(f"checkpoint parameter {name!r} not in model")
        if model.params[name].shape != value.shape:
            raise GraphFormatError(f"checkpoint parameter {name!r} has wrong shape")
    model.params = params
    metrics = evaluate(model, task, args.split, constant=args.constant)
    report = {
        "tool_version": __version__,
        "config_hash": manifest.get("config_hash"),
        "split": args.split,
        "constant_attention": args.constant,
        "metrics": metrics,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_sweep(args) -> int:
    task = parse_dataset(Path(args.data).read_text())
    if args.space:
        space = load_space(args.space)
    elif isinstance(task, NodeTask):
        space = transductive_space()
    else:
        space = inductive_space()
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.patience is not None:
        overrides["patience"] = args.patience
    records = run_sweep(
        task,
        space,
        args.trials,
        args.seed,
        args.out,
        logit_mode=args.logit_mode,
        norm_kind=args.norm_kind,
        parallelism=args.parallelism,
        overrides=overrides or None,
        folds=args.folds,
        fold_limit=args.fold_limit,
    )
    ok = [r for r in records if r["status"] == "ok"]
    summary = {
        "tool_version": __version__,
        "seed": args.seed,
        "trials": len(records),
        "succeeded": len(ok),
        "diverged": len(records) - len(ok),
    }
    if ok:
        top = best_trial(records)
        summary["best"] = {
            "trial": top["trial"],
            "objective": top["objective"],
            "config": top["config"],
            "config_hash": top["config_hash"],
        }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_stats(args) -> int:
    doc = json.loads(Path(args.samples).read_text())
    if not isinstance(doc, dict) or not doc:
        raise GraphFormatError("samples file must map names to value lists")
    samples = {str(k): np.asarray(v, dtype=np.float64) for k, v in doc.items()}
    report = {
        "tool_version": __version__,
        "pairwise": pairwise_pvalues(samples, method=args.method),
        "cdf": cdf_tables(samples),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relgat",
        description="Relational graph attention: data, training, search, analysis.",
    )
    p.add_argument("--version", action="version", version=f"relgat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic graph-classification corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--graphs", type=int, default=100)
    g.add_argument("--nodes", type=int, default=20)
    g.add_argument("--relations", type=int, default=4)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--noise-edges", type=int, default=40)
    g.add_argument("--train-frac", type=float, default=0.6)
    g.add_argument("--val-frac", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--logit-mode", choices=["additive", "multiplicative"], default="additive")
    t.add_argument("--norm-kind", choices=["wirgat", "argat"], default="wirgat")
    t.add_argument("--heads", type=int, default=1)
    t.add_argument("--hidden-units", type=int, default=16)
    t.add_argument("--embed-dim", type=int, default=None)
    t.add_argument("--graph-units", type=int, default=32)
    t.add_argument("--dense-units", type=int, default=64)
    t.add_argument("--basis-w", type=int, default=None)
    t.add_argument("--basis-a", type=int, default=None)
    t.add_argument("--no-bias", action="store_true")
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--feature-dropout", type=float, default=0.0)
    t.add_argument("--edge-dropout", type=float, default=0.0)
    t.add_argument("--l2", type=float, default=None, help="weight for all four kernel groups")
    t.add_argument("--l2-layer1-w", dest="l2_layer1_w", type=float, default=None)
    t.add_argument("--l2-layer1-a", dest="l2_layer1_a", type=float, default=None)
    t.add_argument("--l2-layer2-w", dest="l2_layer2_w", type=float, default=None)
    t.add_argument("--l2-layer2-a", dest="l2_layer2_a", type=float, default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "validation", "test"], default="test")
    e.add_argument(
        "--constant",
        action="store_true",
        help="replace learned attention with uniform weights over each support",
    )
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sweep", help="random hyperparameter search")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="JSONL record file (appended, resumable)")
    s.add_argument("--space", default=None, help="JSON prior file; default depends on task")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--logit-mode", choices=["additive", "multiplicative"], default="additive")
    s.add_argument("--norm-kind", choices=["wirgat", "argat"], default="wirgat")
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--patience", type=int, default=None)
    s.add_argument("--folds", type=int, default=None)
    s.add_argument("--fold-limit", type=int, default=None)
    s.set_defaults(func=_cmd_sweep)

    st = sub.add_parser("stats", help="rank tests and CDF tables for metric samples")
    st.add_argument("--samples", required=True, help="JSON file mapping names to value lists")
    st.add_argument("--method", choices=["auto", "exact", "approx"], default="auto")
    st.add_argument("--out", default=None)
    st.set_defaults(func=_cmd_stats)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GraphFormatError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
