"""Task architectures built from relational attention layers.

Two models are provided. The node classifier stacks two attention layers
(concatenated heads with relu, then mean-aggregated heads with identity) and
reads class probabilities per node. The graph classifier stacks two
concatenating attention layers, pools each graph by mean and max, and maps
the pooled vector through two dense layers to per-task class probabilities.

Both expose parameters as an ordered name -> float64 array dict, which also
fixes the checkpoint layout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .layers import RgatLayer, glorot
from .tensor import (
    Tape,
    Tensor,
    add,
    concat_cols,
    gather_rows,
    log,
    matmul,
    mul,
    relu,
    reshape,
    row_softmax,
    rowsum,
    segment_reduce,
    sum_all,
    tanh,
)

__all__ = [
    "GraphClassifier",
    "GraphClassifierConfig",
    "NodeClassifier",
    "NodeClassifierConfig",
    "bind_params",
    "config_hash",
    "graph_gather",
    "inverse_frequency_weights",
    "load_checkpoint",
    "masked_cross_entropy",
    "save_checkpoint",
    "weighted_cross_entropy",
]


def bind_params(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One leaf per parameter, in declaration order."""
    return {name: tape.leaf(value) for name, value in params.items()}


def graph_gather(node_features: Tensor, graph_segment, graph_count: int) -> Tensor:
    """Pools node rows into per-graph rows: mean and max, concatenated."""
    mean_part = segment_reduce(node_features, graph_segment, graph_count, "mean")
    max_part = segment_reduce(node_features, graph_segment, graph_count, "max")
    return concat_cols([mean_part, max_part])


def masked_cross_entropy(probs: Tensor, node_ids, classes) -> Tensor:
    """Mean negative log-probability of the true class over supervised nodes.

    probs is (N, C) row-stochastic; node_ids picks the supervised rows and
    classes gives their labels. The true-class probability is gathered
    before the log so padding rows can never poison the loss.
    """
    ids = np.asarray(node_ids, dtype=np.int64)
    cls = np.asarray(classes, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("no supervised nodes")
    if ids.shape != cls.shape or ids.ndim != 1:
        raise ValueError("node ids and classes must be aligned flat arrays")
    n, c = probs.shape
    if ids.min() < 0 or ids.max() >= n:
        raise ValueError("supervised node id out of range")
    if cls.min() < 0 or cls.max() >= c:
        raise ValueError("class label out of range")
    rows = gather_rows(probs, ids)
    onehot = np.zeros((ids.size, c))
    onehot[np.arange(ids.size), cls] = 1.0
    picked = rowsum(mul(rows, onehot))
    return mul(sum_all(log(picked)), -1.0 / ids.size)


def inverse_frequency_weights(graph_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-task class weights proportional to 1/count, mean 1 over the
    classes that actually occur; absent classes get weight 0."""
    labels = np.asarray(graph_labels, dtype=np.int64)
    if labels.ndim != 2:
        raise ValueError("graph labels must be (graphs, tasks)")
    t = labels.shape[1]
    weights = np.zeros((t, num_classes))
    for task in range(t):
        col = labels[:, task]
        col = col[col >= 0]
        counts = np.bincount(col, minlength=num_classes).astype(np.float64)
        present = counts > 0
        if not present.any():
            continue
        w = np.zeros(num_classes)
        w[present] = 1.0 / counts[present]
        w *= present.sum() / w.sum()
        weights[task] = w
    return weights


def weighted_cross_entropy(probs: Tensor, graph_labels, weights) -> Tensor:
    """Weighted mean negative log-probability over labelled (graph, task)
    pairs.

    probs is (graphs*tasks, C) row-stochastic with row g*T + t for graph g,
    task t; graph_labels is (graphs, tasks) with -1 marking a missing label;
    weights is (tasks, C).
    """
    labels = np.asarray(graph_labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if labels.ndim != 2:
        raise ValueError("graph labels must be (graphs, tasks)")
    g, t = labels.shape
    c = probs.shape[1]
    if probs.shape[0] != g * t:
        raise ValueError(f"expected {g * t} probability rows, got {probs.shape[0]}")
    if w.shape != (t, c):
        raise ValueError(f"weights must be {(t, c)}, got {w.shape}")
    gi, ti = np.nonzero(labels >= 0)
    if gi.size == 0:
        raise ValueError("no labelled graph/task pairs")
    cls = labels[gi, ti]
    if cls.max() >= c:
        raise ValueError("class label out of range")
    rows = gather_rows(probs, gi * t + ti)
    onehot = np.zeros((gi.size, c))
    onehot[np.arange(gi.size), cls] = 1.0
    picked = rowsum(mul(rows, onehot))
    factors = w[ti, cls]
    return mul(sum_all(mul(log(picked), factors)), -1.0 / gi.size)


# ---------------------------------------------------------------------------
# node classification


@dataclass(frozen=True)
class NodeClassifierConfig:
    in_dim: int
    num_relations: int
    num_classes: int
    hidden_units: int = 16
    heads: int = 1
    logit_mode: str = "additive"
    norm_kind: str = "wirgat"
    attention_dim: int | None = None
    basis_w: int | None = None
    basis_a: int | None = None
    use_bias: bool = True
    one_hot: bool = False
    embed_dim: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NodeClassifierConfig":
        return cls(**d)


class NodeClassifier:
    """Two attention layers ending in per-node class probabilities.

    Layer 1 concatenates heads and applies relu; layer 2 averages heads,
    stays linear, and its width is the class count. With one-hot inputs the
    identity features are folded into a learned embedding table, so the
    first projection never materializes an N x N input.
    """

    def __init__(self, rng: np.random.Generator, config: NodeClassifierConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        if config.one_hot:
            embed_dim = config.embed_dim or config.hidden_units
            self.embed_dim = embed_dim
            self.params["embed"] = glorot(rng, config.in_dim, embed_dim)
            in_dim = embed_dim
        else:
            if config.embed_dim is not None:
                raise ValueError("embed_dim only applies to one-hot inputs")
            self.embed_dim = None
            in_dim = config.in_dim
        self.layer1 = RgatLayer(
            rng,
            "layer1",
            in_dim,
            config.hidden_units,
            config.heads,
            config.num_relations,
            logit_mode=config.logit_mode,
            norm_kind=config.norm_kind,
            attention_dim=config.attention_dim,
            head_agg="concat",
            activation="relu",
            use_bias=config.use_bias,
            basis_w=config.basis_w,
            basis_a=config.basis_a,
        )
        self.layer2 = RgatLayer(
            rng,
            "layer2",
            config.hidden_units,
            config.num_classes,
            config.heads,
            config.num_relations,
            logit_mode=config.logit_mode,
            norm_kind=config.norm_kind,
            attention_dim=config.attention_dim,
            head_agg="mean",
            activation="identity",
            use_bias=config.use_bias,
            basis_w=config.basis_w,
            basis_a=config.basis_a,
        )
        self.params.update(self.layer1.params)
        self.params.update(self.layer2.params)

    def l2_groups(self) -> dict[str, list[str]]:
        return {
            "layer1_w": self.layer1.w_parameter_names(),
            "layer1_a": self.layer1.a_parameter_names(),
            "layer2_w": self.layer2.w_parameter_names(),
            "layer2_a": self.layer2.a_parameter_names(),
        }

    def forward(
        self,
        leaves: dict[str, Tensor],
        edges,
        num_nodes: int,
        features: Tensor | None,
        *,
        constant: bool = False,
        input_mask: np.ndarray | None = None,
        hidden_mask: np.ndarray | None = None,
    ) -> Tensor:
        if self.config.one_hot:
            if num_nodes != self.config.in_dim:
                raise ValueError("one-hot model is bound to a fixed node count")
            h = leaves["embed"]
        else:
            if features is None:
                raise ValueError("feature matrix required")
            h = features
        if input_mask is not None:
            h = mul(h, input_mask)
        h = self.layer1.forward(leaves, edges, num_nodes, h, constant=constant)
        if hidden_mask is not None:
            h = mul(h, hidden_mask)
        out = self.layer2.forward(leaves, edges, num_nodes, h, constant=constant)
        return row_softmax(out)


# ---------------------------------------------------------------------------
# graph classification


@dataclass(frozen=True)
class GraphClassifierConfig:
    feature_dim: int
    num_relations: int
    num_tasks: int
    num_classes: int
    graph_units: int = 32
    dense_units: int = 64
    heads: int = 1
    logit_mode: str = "additive"
    norm_kind: str = "wirgat"
    attention_dim: int | None = None
    use_bias: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GraphClassifierConfig":
        return cls(**d)


class GraphClassifier:
    """Two concatenating attention layers, a mean/max pool squashed by tanh,
    then two dense layers producing one C-way distribution per task."""

    def __init__(self, rng: np.random.Generator, config: GraphClassifierConfig):
        self.config = config
        self.layer1 = RgatLayer(
            rng,
            "layer1",
            config.feature_dim,
            config.graph_units,
            config.heads,
            config.num_relations,
            logit_mode=config.logit_mode,
            norm_kind=config.norm_kind,
            attention_dim=config.attention_dim,
            head_agg="concat",
            activation="relu",
            use_bias=config.use_bias,
        )
        self.layer2 = RgatLayer(
            rng,
            "layer2",
            config.graph_units,
            config.graph_units,
            config.heads,
            config.num_relations,
            logit_mode=config.logit_mode,
            norm_kind=config.norm_kind,
            attention_dim=config.attention_dim,
            head_agg="concat",
            activation="relu",
            use_bias=config.use_bias,
        )
        self.params: dict[str, np.ndarray] = {}
        self.params.update(self.layer1.params)
        self.params.update(self.layer2.params)
        pooled = 2 * config.graph_units
        out_width = config.num_tasks * config.num_classes
        self.params["dense1.w"] = glorot(rng, pooled, config.dense_units)
        self.params["dense1.b"] = np.zeros(config.dense_units)
        self.params["dense2.w"] = glorot(rng, config.dense_units, out_width)
        self.params["dense2.b"] = np.zeros(out_width)

    def l2_groups(self) -> dict[str, list[str]]:
        return {
            "layer1_w": self.layer1.w_parameter_names(),
            "layer1_a": self.layer1.a_parameter_names(),
            "layer2_w": self.layer2.w_parameter_names(),
            "layer2_a": self.layer2.a_parameter_names(),
        }

    def forward(
        self,
        leaves: dict[str, Tensor],
        edges,
        num_nodes: int,
        features: Tensor,
        graph_segment,
        graph_count: int,
        *,
        constant: bool = False,
        input_mask: np.ndarray | None = None,
        hidden_masks: tuple[np.ndarray | None, np.ndarray | None] = (None, None),
        dense_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Returns (graph_count * num_tasks, num_classes) probabilities with
        row g*T + t holding graph g's distribution for task t."""
        h = features
        if input_mask is not None:
            h = mul(h, input_mask)
        h = self.layer1.forward(leaves, edges, num_nodes, h, constant=constant)
        if hidden_masks[0] is not None:
            h = mul(h, hidden_masks[0])
        h = self.layer2.forward(leaves, edges, num_nodes, h, constant=constant)
        if hidden_masks[1] is not None:
            h = mul(h, hidden_masks[1])
        pooled = tanh(graph_gather(h, graph_segment, graph_count))
        d = relu(add(matmul(pooled, leaves["dense1.w"]), leaves["dense1.b"]))
        if dense_mask is not None:
            d = mul(d, dense_mask)
        out = add(matmul(d, leaves["dense2.w"]), leaves["dense2.b"])
        cfg = self.config
        out = reshape(out, (graph_count * cfg.num_tasks, cfg.num_classes))
        return row_softmax(out)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form of a config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(
    directory,
    params: dict[str, np.ndarray],
    config: dict,
    extra: dict | None = None,
) -> None:
    """Writes manifest.json plus params.bin (little-endian float64,
    declaration order)."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    manifest = {
        "format": 1,
        "dtype": "<f8",
        "total_values": offset,
        "config": config,
        "config_hash": config_hash(config),
        "parameters": entries,
    }
    if extra:
        manifest.update(extra)
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(directory)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("dtype") != "<f8":
        raise ValueError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    if raw.size != manifest["total_values"]:
        raise ValueError(
            f"checkpoint holds {raw.size} values, manifest declares {manifest['total_values']}"
        )
    params = {}
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        params[entry["name"]] = (
            raw[start : start + size].reshape(shape).astype(np.float64)
        )
    return params, manifest
