"""Multi-relational graph data model, JSON documents, batching, synthesis.

A graph holds N nodes, R relation types and per-relation directed edges. An
edge is stored as a (target, source) pair: the source node sends its message
to the target node, i.e. source belongs to the target's neighborhood under
that relation. Documents store [relation, target, source] triples in the
same orientation.

Canonical form sorts edges by (relation, target, source); duplicates are
rejected. ``serialize_graph`` always emits canonical form, and parsing a
canonical document then serializing it reproduces the input byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "BatchedGraph",
    "GraphFormatError",
    "GraphTask",
    "LabelSet",
    "NodeTask",
    "ONE_HOT",
    "RelGraph",
    "Split",
    "batch_graphs",
    "build_graph",
    "generate_planted",
    "parse_dataset",
    "parse_graph",
    "serialize_dataset",
    "serialize_graph",
    "with_self_relation",
]

ONE_HOT = "one_hot_index"

# generate_planted wiring: node 0 collects the signal, node 1 carries it
READOUT_NODE = 0
MARKER_NODE = 1


class GraphFormatError(ValueError):
    """A graph document or construction argument violates the data contract."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RelGraph:
    """Immutable multi-relational graph.

    edges holds one (targets, sources) pair of int64 arrays per relation, in
    canonical (target, source) order. features is an N x F float64 matrix,
    or None when the document requested learned one-hot embeddings.
    """

    num_nodes: int
    num_relations: int
    edges: tuple[tuple[np.ndarray, np.ndarray], ...]
    features: np.ndarray | None
    feature_dim: int
    one_hot_features: bool = False
    self_relation: bool = False

    def __post_init__(self):
        if self.num_nodes < 0 or self.num_relations < 1:
            raise GraphFormatError("graph needs num_nodes >= 0 and num_relations >= 1")
        if self.feature_dim < 1:
            raise GraphFormatError("feature_dim must be at least 1")
        if len(self.edges) != self.num_relations:
            raise GraphFormatError("edge lists must cover every relation")

    @property
    def num_edges(self) -> int:
        return sum(len(t) for t, _ in self.edges)

    def relation_edges(self, relation: int) -> tuple[np.ndarray, np.ndarray]:
        return self.edges[relation]

    def edge_triples(self) -> list[tuple[int, int, int]]:
        out = []
        for r, (tgt, src) in enumerate(self.edges):
            out.extend((r, int(t), int(s)) for t, s in zip(tgt, src))
        return out

    def in_degrees(self, relation: int | None = None) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        relations = range(self.num_relations) if relation is None else [relation]
        for r in relations:
            tgt, _ = self.edges[r]
            if len(tgt):
                deg += np.bincount(tgt, minlength=self.num_nodes)
        return deg


def _canonical_edges(
    num_nodes: int, num_relations: int, triples: Iterable[Sequence[int]]
) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    per_rel: list[list[tuple[int, int]]] = [[] for _ in range(num_relations)]
    seen: set[tuple[int, int, int]] = set()
    for item in triples:
        if len(item) != 3:
            raise GraphFormatError(f"malformed edge entry {item!r}")
        r, t, s = (int(v) for v in item)
        if not 0 <= r < num_relations:
            raise GraphFormatError(f"relation index out of range: {r}")
        if not (0 <= t < num_nodes and 0 <= s < num_nodes):
            raise GraphFormatError(f"node index out of range in edge ({r}, {t}, {s})")
        key = (r, t, s)
        if key in seen:
            raise GraphFormatError(f"duplicate edge ({r}, {t}, {s})")
        seen.add(key)
        per_rel[r].append((t, s))
    out = []
    for pairs in per_rel:
        pairs.sort()
        tgt = _frozen(np.array([p[0] for p in pairs], dtype=np.int64))
        src = _frozen(np.array([p[1] for p in pairs], dtype=np.int64))
        out.append((tgt, src))
    return tuple(out)


def build_graph(
    num_nodes: int,
    num_relations: int,
    triples: Iterable[Sequence[int]],
    features: np.ndarray | None = None,
    *,
    one_hot: bool = False,
    feature_dim: int | None = None,
    self_relation: bool = False,
) -> RelGraph:
    edges = _canonical_edges(num_nodes, num_relations, triples)
    if one_hot:
        if features is not None:
            raise GraphFormatError("one-hot graphs carry no explicit feature matrix")
        fdim = feature_dim if feature_dim is not None else max(num_nodes, 1)
        return RelGraph(num_nodes, num_relations, edges, None, fdim, True, self_relation)
    if features is None:
        raise GraphFormatError("features are required unless one_hot is set")
    feat = np.asarray(features, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] != num_nodes:
        raise GraphFormatError(
            f"dimension mismatch: features {feat.shape} for {num_nodes} nodes"
        )
    if feature_dim is not None and feature_dim != feat.shape[1]:
        raise GraphFormatError(
            f"dimension mismatch: feature_dim {feature_dim} vs matrix width {feat.shape[1]}"
        )
    if not np.all(np.isfinite(feat)):
        raise GraphFormatError("features must be finite")
    return RelGraph(
        num_nodes, num_relations, edges, _frozen(feat.copy()), feat.shape[1], False, self_relation
    )


@dataclass(frozen=True)
class LabelSet:
    """Supervision attached to a graph document.

    kind "node": node_classes maps node id to a class in [0, num_classes).
    kind "graph": graph_classes is a (graphs, tasks) int matrix with -1
    marking entries without a label; class_weights is an optional
    (tasks, classes) non-negative matrix.
    """

    kind: str
    num_classes: int
    node_classes: Mapping[int, int] | None = None
    num_tasks: int = 1
    graph_classes: np.ndarray | None = None
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("node", "graph"):
            raise GraphFormatError(f"unknown label kind {self.kind!r}")
        if self.num_classes < 1:
            raise GraphFormatError("num_classes must be at least 1")
        if self.kind == "node":
            if self.node_classes is None:
                raise GraphFormatError("node labels need node_classes")
            for node, cls in self.node_classes.items():
                if not 0 <= cls < self.num_classes:
                    raise GraphFormatError(f"class out of range for node {node}: {cls}")
        else:
            if self.graph_classes is None:
                raise GraphFormatError("graph labels need graph_classes")
            gc = self.graph_classes
            if gc.ndim != 2 or gc.shape[1] != self.num_tasks:
                raise GraphFormatError("graph_classes must be (graphs, tasks)")
            if gc.size and (gc.min() < -1 or gc.max() >= self.num_classes):
                raise GraphFormatError("graph class out of range")
            if self.class_weights is not None:
                w = self.class_weights
                if w.shape != (self.num_tasks, self.num_classes):
                    raise GraphFormatError("class_weights must be (tasks, classes)")
                if np.any(w < 0):
                    raise GraphFormatError("class weights must be non-negative")

    def labelled_nodes(self) -> list[int]:
        return sorted(self.node_classes) if self.node_classes is not None else []

    def labelled_graphs(self) -> list[int]:
        if self.graph_classes is None:
            return []
        return [int(i) for i in np.flatnonzero((self.graph_classes >= 0).any(axis=1))]


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        parts = [set(self.train), set(self.validation), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise GraphFormatError("split parts must be disjoint")

    def part(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class NodeTask:
    """Transductive bundle: one graph, node labels, node-index split."""

    graph: RelGraph
    labels: LabelSet
    split: Split


@dataclass(frozen=True)
class GraphTask:
    """Inductive bundle: many graphs, per-graph task labels, graph-index split."""

    graphs: tuple[RelGraph, ...]
    labels: LabelSet
    split: Split


@dataclass(frozen=True)
class BatchedGraph:
    """Several graphs merged block-diagonally into one.

    graph_segment[i] gives the index of the member graph that node i of the
    merged graph belongs to; segments are contiguous and no edge crosses a
    segment boundary.
    """

    graph: RelGraph
    graph_segment: np.ndarray
    graph_count: int


# ---------------------------------------------------------------------------
# document parsing and serialization


def _parse_labels(obj, num_nodes: int, num_graphs: int) -> LabelSet | None:
    if obj is None:
        return None
    if not isinstance(obj, dict) or "kind" not in obj:
        raise GraphFormatError("malformed labels block")
    kind = obj["kind"]
    if kind == "node":
        classes = obj.get("node_classes")
        if not isinstance(classes, dict):
            raise GraphFormatError("malformed node labels")
        mapping = {}
        for key, value in classes.items():
            node = int(key)
            if not 0 <= node < num_nodes:
                raise GraphFormatError(f"labelled node index out of range: {node}")
            mapping[node] = int(value)
        return LabelSet("node", int(obj["num_classes"]), node_classes=mapping)
    if kind == "graph":
        gc = np.asarray(obj["graph_classes"], dtype=np.int64)
        if gc.ndim != 2 or gc.shape[0] != num_graphs:
            raise GraphFormatError("graph_classes must carry one row per graph")
        weights = obj.get("class_weights")
        w = None if weights is None else np.asarray(weights, dtype=np.float64)
        return LabelSet(
            "graph",
            int(obj["num_classes"]),
            num_tasks=int(obj["num_tasks"]),
            graph_classes=_frozen(gc),
            class_weights=None if w is None else _frozen(w),
        )
    raise GraphFormatError(f"unknown label kind {kind!r}")


def _parse_split(obj, labels: LabelSet | None) -> Split | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise GraphFormatError("malformed splits block")
    parts = []
    for name in ("train", "validation", "test"):
        raw = obj.get(name, [])
        parts.append(tuple(int(v) for v in raw))
    split = Split(*parts)
    if labels is not None:
        labelled = set(
            labels.labelled_nodes() if labels.kind == "node" else labels.labelled_graphs()
        )
        used = set(split.train) | set(split.validation) | set(split.test)
        if not used <= labelled:
            raise GraphFormatError("split indices must refer to labelled items")
    return split


def _graph_body(doc: dict) -> RelGraph:
    try:
        num_nodes = int(doc["num_nodes"])
        num_relations = int(doc["num_relations"])
        edges = doc["edges"]
        features = doc["features"]
    except (KeyError, TypeError) as exc:
        raise GraphFormatError(f"malformed document: {exc}") from None
    if features == ONE_HOT:
        fdim = doc.get("feature_dim")
        return build_graph(
            num_nodes,
            num_relations,
            edges,
            one_hot=True,
            feature_dim=None if fdim is None else int(fdim),
        )
    feat = np.asarray(features, dtype=np.float64)
    declared = doc.get("feature_dim")
    return build_graph(
        num_nodes,
        num_relations,
        edges,
        feat,
        feature_dim=None if declared is None else int(declared),
    )


def parse_graph(document) -> tuple[RelGraph, LabelSet | None, Split | None]:
    """Reads a single-graph JSON document (str, bytes or parsed dict)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"malformed document: {exc}") from None
    else:
        doc = document
    if not isinstance(doc, dict):
        raise GraphFormatError("malformed document: expected an object")
    graph = _graph_body(doc)
    labels = _parse_labels(doc.get("labels"), graph.num_nodes, 1)
    split = _parse_split(doc.get("splits"), labels)
    return graph, labels, split


def _labels_payload(labels: LabelSet | None):
    if labels is None:
        return None
    if labels.kind == "node":
        return {
            "kind": "node",
            "num_classes": labels.num_classes,
            "node_classes": {str(k): int(v) for k, v in sorted(labels.node_classes.items())},
        }
    payload = {
        "kind": "graph",
        "num_classes": labels.num_classes,
        "num_tasks": labels.num_tasks,
        "graph_classes": labels.graph_classes.tolist(),
    }
    if labels.class_weights is not None:
        payload["class_weights"] = labels.class_weights.tolist()
    return payload


def _split_payload(split: Split | None):
    if split is None:
        return None
    return {
        "train": list(split.train),
        "validation": list(split.validation),
        "test": list(split.test),
    }


def _graph_payload(graph: RelGraph) -> dict:
    return {
        "num_nodes": graph.num_nodes,
        "num_relations": graph.num_relations,
        "feature_dim": graph.feature_dim,
        "features": ONE_HOT if graph.one_hot_features else graph.features.tolist(),
        "edges": [[r, t, s] for (r, t, s) in graph.edge_triples()],
    }


def serialize_graph(
    graph: RelGraph, labels: LabelSet | None = None, split: Split | None = None
) -> str:
    """Canonical single-graph document; inverse of parse_graph on canonical input."""
    doc = _graph_payload(graph)
    if labels is not None:
        doc["labels"] = _labels_payload(labels)
    if split is not None:
        doc["splits"] = _split_payload(split)
    return json.dumps(doc, separators=(",", ":"))


def parse_dataset(document) -> NodeTask | GraphTask:
    """Reads either a single-graph document or a {"graphs": [...]} collection."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"malformed document: {exc}") from None
    else:
        doc = document
    if not isinstance(doc, dict):
        raise GraphFormatError("malformed document: expected an object")
    if "graphs" in doc:
        graphs = tuple(_graph_body(g) for g in doc["graphs"])
        labels = _parse_labels(doc.get("labels"), 0, len(graphs))
        if labels is None or labels.kind != "graph":
            raise GraphFormatError("graph collections need graph labels")
        split = _parse_split(doc.get("splits"), labels)
        if split is None:
            raise GraphFormatError("graph collections need splits")
        return GraphTask(graphs, labels, split)
    graph, labels, split = parse_graph(doc)
    if labels is None or split is None:
        raise GraphFormatError("a task document needs labels and splits")
    if labels.kind == "node":
        return NodeTask(graph, labels, split)
    return GraphTask((graph,), labels, split)


def serialize_dataset(task: NodeTask | GraphTask) -> str:
    if isinstance(task, NodeTask):
        return serialize_graph(task.graph, task.labels, task.split)
    doc = {
        "graphs": [_graph_payload(g) for g in task.graphs],
        "labels": _labels_payload(task.labels),
        "splits": _split_payload(task.split),
    }
    return json.dumps(doc, separators=(",", ":"))


# ---------------------------------------------------------------------------
# structural transforms


def with_self_relation(graph: RelGraph) -> RelGraph:
    """Appends relation R holding one (i, i) edge per node."""
    if graph.self_relation:
        raise GraphFormatError("self relation already present")
    ids = np.arange(graph.num_nodes, dtype=np.int64)
    edges = graph.edges + ((_frozen(ids.copy()), _frozen(ids.copy())),)
    return replace(
        graph,
        num_relations=graph.num_relations + 1,
        edges=edges,
        self_relation=True,
    )


def batch_graphs(graphs: Sequence[RelGraph]) -> BatchedGraph:
    """Merges graphs block-diagonally; nodes renumber by running offset."""
    if not graphs:
        raise GraphFormatError("nothing to batch")
    first = graphs[0]
    for g in graphs[1:]:
        if g.num_relations != first.num_relations:
            raise GraphFormatError("relation-count mismatch between batch members")
        if g.feature_dim != first.feature_dim:
            raise GraphFormatError("feature-dim mismatch between batch members")
        if g.one_hot_features or first.one_hot_features:
            raise GraphFormatError("one-hot graphs cannot be batched")
        if g.self_relation != first.self_relation:
            raise GraphFormatError("self-relation flags disagree between batch members")
    if first.one_hot_features:
        raise GraphFormatError("one-hot graphs cannot be batched")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    total = int(offsets[-1])
    triples = []
    for i, g in enumerate(graphs):
        off = int(offsets[i])
        for r, (tgt, src) in enumerate(g.edges):
            for t, s in zip(tgt, src):
                triples.append((r, int(t) + off, int(s) + off))
    features = (
        np.concatenate([g.features for g in graphs], axis=0)
        if total
        else np.zeros((0, first.feature_dim))
    )
    merged = build_graph(
        total,
        first.num_relations,
        triples,
        features,
        self_relation=first.self_relation,
    )
    segment = np.concatenate(
        [np.full(g.num_nodes, i, dtype=np.int64) for i, g in enumerate(graphs)]
    ) if total else np.zeros(0, dtype=np.int64)
    return BatchedGraph(merged, _frozen(segment), len(graphs))


# ---------------------------------------------------------------------------
# synthetic data


def generate_planted(
    seed: int,
    n_graphs: int,
    nodes_per_graph: int,
    num_relations: int,
    feature_dim: int,
    noise_edges: int,
) -> list[tuple[RelGraph, int]]:
    """Builds binary-labelled graphs with a planted structural rule.

    Each graph wires the marker node (1) into the readout node (0) through
    relation 0 when the label is 1 and through relation 1 otherwise. Noise
    edges draw (relation, target, source) uniformly from the remaining
    relations. Labels are balanced to within one graph, features are unit
    normal with fixed offsets marking the readout and marker nodes, and the
    whole construction is a pure function of the seed.
    """
    if num_relations < 2:
        raise GraphFormatError("degenerate sizes: need at least two relations")
    if nodes_per_graph < 2 or n_graphs < 1 or feature_dim < 2:
        raise GraphFormatError("degenerate sizes: graphs need >= 2 nodes and >= 2 features")
    if noise_edges < 0:
        raise GraphFormatError("degenerate sizes: negative noise count")
    if noise_edges > 0 and num_relations < 3:
        raise GraphFormatError("degenerate sizes: noise edges need a third relation")
    capacity = (num_relations - 2) * nodes_per_graph * nodes_per_graph
    if noise_edges > capacity // 2 and noise_edges > 0:
        raise GraphFormatError("degenerate sizes: noise edges exceed half the free slots")

    rng = np.random.default_rng(seed)
    labels = np.zeros(n_graphs, dtype=np.int64)
    labels[: n_graphs // 2] = 1
    labels = rng.permutation(labels)

    out: list[tuple[RelGraph, int]] = []
    for gi in range(n_graphs):
        label = int(labels[gi])
        signal_relation = 0 if label == 1 else 1
        triples = [(signal_relation, READOUT_NODE, MARKER_NODE)]
        used = {tuple(triples[0])}
        placed = 0
        while placed < noise_edges:
            r = 2 + int(rng.integers(num_relations - 2))
            t = int(rng.integers(nodes_per_graph))
            s = int(rng.integers(nodes_per_graph))
            key = (r, t, s)
            if key in used:
                continue
            used.add(key)
            triples.append(key)
            placed += 1
        features = rng.normal(size=(nodes_per_graph, feature_dim))
        features[MARKER_NODE, 0] += 2.0
        features[READOUT_NODE, 1] += 2.0
        graph = build_graph(nodes_per_graph, num_relations, triples, features)
        out.append((graph, label))
    return out
