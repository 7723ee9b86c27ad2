"""Relational graph attention layers plus the constant-coefficient baselines.

A layer owns, per relation r and head k, a projection kernel W (F x F') and
an attention kernel A (2F' x D) whose top half maps projected features to
queries and bottom half to keys. Logits are either additive,
leaky_relu(q_target + k_source) with D = 1, or multiplicative,
dot(q_target, k_source). Coefficients normalize the logits by softmax either
within each (target, relation) support ("wirgat") or across all relations of
a target ("argat"); the constant variants ("c-wirgat", "c-argat") replace
the softmax with a uniform weight over the same support and are meant for
evaluating trained models with attention switched off.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_flat,
    concat_rows,
    gather_rows,
    leaky_relu,
    matmul,
    mul,
    reshape,
    rowsum,
    scale_rows,
    segment_reduce,
    segment_softmax,
    slice_rows,
    tanh,
)

__all__ = [
    "ACTIVATIONS",
    "AttentionResult",
    "LEAKY_SLOPE",
    "LOGIT_MODES",
    "NORM_KINDS",
    "RgatLayer",
    "attention_coefficients",
    "attention_logits",
    "compose_kernels",
    "degree_rgcn_forward",
    "glorot",
    "intermediate_representations",
    "rgcn_forward",
]

LEAKY_SLOPE = 0.2

LOGIT_MODES = ("additive", "multiplicative")
NORM_KINDS = ("wirgat", "argat")
COEFFICIENT_KINDS = ("wirgat", "argat", "c-wirgat", "c-argat")
ACTIVATIONS = ("relu", "tanh", "identity")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def _apply_activation(t: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return leaky_relu(t, 0.0)
    if activation == "tanh":
        return tanh(t)
    if activation == "identity":
        return t
    raise ValueError(f"unknown activation {activation!r}")


def intermediate_representations(h: Tensor, kernel: Tensor) -> Tensor:
    """Projects node features through one relation kernel: G = H W."""
    return matmul(h, kernel)


def compose_kernels(coefficients: Tensor, bases: Tensor, index: int, shape: tuple[int, int]) -> Tensor:
    """Combines flattened basis matrices with one coefficient row.

    coefficients is (R*K, B), bases is (B, prod(shape)); row `index` selects
    the (relation, head) slot and the weighted sum is reshaped to `shape`.
    """
    row = slice_rows(coefficients, index, index + 1)
    flat = matmul(row, bases)
    return reshape(flat, shape)


def attention_logits(
    g: Tensor,
    targets,
    sources,
    kernel: Tensor,
    mode: str,
    slope: float = LEAKY_SLOPE,
) -> Tensor:
    """Edge logits for one relation from projected features.

    g holds the relation's projected node features (N x F'); kernel is the
    combined query/key map (2F' x D). Returns one flat logit per edge, in
    the edge order given.
    """
    if mode not in LOGIT_MODES:
        raise ValueError(f"unknown logit mode {mode!r}")
    if g.ndim != 2:
        raise ValueError("projected features must be a matrix")
    fp = g.shape[1]
    if kernel.ndim != 2 or kernel.shape[0] != 2 * fp:
        raise ValueError(f"attention kernel must have {2 * fp} rows, got {kernel.shape}")
    if mode == "additive" and kernel.shape[1] != 1:
        raise ValueError("additive logits require attention dim 1")
    tgt = np.asarray(targets, dtype=np.int64)
    src = np.asarray(sources, dtype=np.int64)
    q = matmul(g, slice_rows(kernel, 0, fp))
    k = matmul(g, slice_rows(kernel, fp, 2 * fp))
    qe = gather_rows(q, tgt)
    ke = gather_rows(k, src)
    if mode == "additive":
        return leaky_relu(reshape(add(qe, ke), (len(tgt),)), slope)
    return rowsum(mul(qe, ke))


@dataclass(frozen=True)
class AttentionResult:
    """Normalized coefficients in canonical relation-major edge order.

    coefficients is a Tensor for learned kinds and a plain array for the
    constant kinds; segments holds the softmax-support key of every edge.
    """

    coefficients: object
    logits: object
    segments: np.ndarray
    relation_slices: tuple[tuple[int, int], ...]

    def coefficient_values(self) -> np.ndarray:
        c = self.coefficients
        return c.data if isinstance(c, Tensor) else c

    def per_relation(self, relation: int) -> np.ndarray:
        start, stop = self.relation_slices[relation]
        return self.coefficient_values()[start:stop]


def attention_coefficients(
    logits: Sequence[Tensor] | None,
    edges: Sequence[tuple[np.ndarray, np.ndarray]],
    num_nodes: int,
    kind: str,
) -> AttentionResult:
    """Normalizes per-relation edge logits into attention coefficients.

    kind "wirgat" runs a softmax within each (target, relation) support,
    "argat" within each target across every relation. The "c-" variants
    ignore the logits and spread the unit mass uniformly over the same
    support: 1/|N_i^(r)| per (target, relation) or 1/sum_r |N_i^(r)| per
    target.
    """
    if kind not in COEFFICIENT_KINDS:
        raise ValueError(f"unknown coefficient kind {kind!r}")
    tgt_parts = [np.asarray(t, dtype=np.int64) for t, _ in edges]
    sizes = [len(t) for t in tgt_parts]
    offsets = np.cumsum([0] + sizes)
    slices = tuple((int(offsets[i]), int(offsets[i + 1])) for i in range(len(edges)))
    tgt_all = np.concatenate(tgt_parts) if tgt_parts else np.zeros(0, dtype=np.int64)
    if tgt_all.size and (tgt_all.min() < 0 or tgt_all.max() >= num_nodes):
        raise ValueError("edge target out of range")
    if kind.endswith("wirgat"):
        segments = (
            np.concatenate([t + r * num_nodes for r, t in enumerate(tgt_parts)])
            if tgt_parts
            else tgt_all
        )
    else:
        segments = tgt_all

    if kind.startswith("c-"):
        if segments.size:
            counts = np.bincount(segments)
            alpha = 1.0 / counts[segments]
        else:
            alpha = np.zeros(0, dtype=np.float64)
        return AttentionResult(alpha, None, segments, slices)

    if logits is None:
        raise ValueError("learned normalization needs logits")
    if len(logits) != len(edges):
        raise ValueError("one logit vector per relation required")
    for part, n in zip(logits, sizes):
        if part.ndim != 1 or part.size != n:
            raise ValueError("logit vectors must align with the edge lists")
    flat = logits[0] if len(logits) == 1 else concat_flat(list(logits))
    alpha = segment_softmax(flat, segments)
    return AttentionResult(alpha, flat, segments, slices)


class RgatLayer:
    """One relational attention layer: parameters plus the forward rule.

    Parameters live as plain float64 arrays in ``self.params`` (a dict whose
    insertion order fixes the checkpoint layout). ``forward`` consumes leaf
    tensors bound to some tape under the same names.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        name: str,
        in_dim: int,
        units: int,
        heads: int,
        num_relations: int,
        *,
        logit_mode: str = "additive",
        norm_kind: str = "wirgat",
        attention_dim: int | None = None,
        head_agg: str = "concat",
        activation: str = "relu",
        use_bias: bool = True,
        basis_w: int | None = None,
        basis_a: int | None = None,
        slope: float = LEAKY_SLOPE,
    ):
        if logit_mode not in LOGIT_MODES:
            raise ValueError(f"unknown logit mode {logit_mode!r}")
        if norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {norm_kind!r}")
        if head_agg not in ("concat", "mean"):
            raise ValueError(f"unknown head aggregation {head_agg!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if min(in_dim, units, heads, num_relations) < 1:
            raise ValueError("layer dimensions must be positive")
        if head_agg == "concat":
            if units % heads:
                raise ValueError(f"head count {heads} must divide the output width {units}")
            per_head = units // heads
        else:
            per_head = units
        if logit_mode == "additive":
            if attention_dim not in (None, 1):
                raise ValueError("additive logits force attention dim 1")
            attention_dim = 1
        elif attention_dim is None:
            attention_dim = per_head
        if attention_dim < 1:
            raise ValueError("attention dim must be positive")

        limit = num_relations * heads
        if basis_w is not None:
            if basis_w < 1:
                raise ValueError("basis size must be positive")
            if basis_w > limit:
                warnings.warn(
                    f"{name}: W basis size {basis_w} exceeds relations*heads={limit}, clamping"
                )
                basis_w = limit
        if basis_a is not None:
            if basis_a < 1:
                raise ValueError("basis size must be positive")
            if basis_a > limit:
                warnings.warn(
                    f"{name}: A basis size {basis_a} exceeds relations*heads={limit}, clamping"
                )
                basis_a = limit

        self.name = name
        self.in_dim = in_dim
        self.units = units
        self.heads = heads
        self.num_relations = num_relations
        self.per_head = per_head
        self.logit_mode = logit_mode
        self.norm_kind = norm_kind
        self.attention_dim = attention_dim
        self.head_agg = head_agg
        self.activation = activation
        self.use_bias = use_bias
        self.basis_w = basis_w
        self.basis_a = basis_a
        self.slope = slope

        self.params: dict[str, np.ndarray] = {}
        if basis_w is None:
            for r in range(num_relations):
                for k in range(heads):
                    self.params[f"{name}.w.r{r}k{k}"] = glorot(rng, in_dim, per_head)
        else:
            rows = [glorot(rng, in_dim, per_head).ravel() for _ in range(basis_w)]
            self.params[f"{name}.w_basis"] = np.stack(rows)
            self.params[f"{name}.w_coeff"] = glorot(rng, limit, basis_w)
        a_rows = 2 * per_head
        if basis_a is None:
            for r in range(num_relations):
                for k in range(heads):
                    self.params[f"{name}.a.r{r}k{k}"] = glorot(rng, a_rows, attention_dim)
        else:
            rows = [glorot(rng, a_rows, attention_dim).ravel() for _ in range(basis_a)]
            self.params[f"{name}.a_basis"] = np.stack(rows)
            self.params[f"{name}.a_coeff"] = glorot(rng, limit, basis_a)
        if use_bias:
            for k in range(heads):
                self.params[f"{name}.bias.k{k}"] = np.zeros(per_head)

    def w_parameter_names(self) -> list[str]:
        if self.basis_w is None:
            return [
                f"{self.name}.w.r{r}k{k}"
                for r in range(self.num_relations)
                for k in range(self.heads)
            ]
        return [f"{self.name}.w_basis", f"{self.name}.w_coeff"]

    def a_parameter_names(self) -> list[str]:
        if self.basis_a is None:
            return [
                f"{self.name}.a.r{r}k{k}"
                for r in range(self.num_relations)
                for k in range(self.heads)
            ]
        return [f"{self.name}.a_basis", f"{self.name}.a_coeff"]

    def kernels(self, leaves: dict[str, Tensor], relation: int, head: int) -> tuple[Tensor, Tensor]:
        """Projection and attention kernels for one (relation, head) slot."""
        slot = relation * self.heads + head
        if self.basis_w is None:
            w = leaves[f"{self.name}.w.r{relation}k{head}"]
        else:
            w = compose_kernels(
                leaves[f"{self.name}.w_coeff"],
                leaves[f"{self.name}.w_basis"],
                slot,
                (self.in_dim, self.per_head),
            )
        if self.basis_a is None:
            a = leaves[f"{self.name}.a.r{relation}k{head}"]
        else:
            a = compose_kernels(
                leaves[f"{self.name}.a_coeff"],
                leaves[f"{self.name}.a_basis"],
                slot,
                (2 * self.per_head, self.attention_dim),
            )
        return w, a

    def forward(
        self,
        leaves: dict[str, Tensor],
        edges: Sequence[tuple[np.ndarray, np.ndarray]],
        num_nodes: int,
        h: Tensor,
        *,
        constant: bool = False,
    ) -> Tensor:
        if len(edges) != self.num_relations:
            raise ValueError(
                f"layer built for {self.num_relations} relations, got {len(edges)} edge lists"
            )
        tgt_parts = [np.asarray(t, dtype=np.int64) for t, _ in edges]
        src_parts = [np.asarray(s, dtype=np.int64) for _, s in edges]
        tgt_all = (
            np.concatenate(tgt_parts) if tgt_parts else np.zeros(0, dtype=np.int64)
        )
        kind = f"c-{self.norm_kind}" if constant else self.norm_kind

        head_sums = []
        for k in range(self.heads):
            projected = []
            logit_parts: list[Tensor] | None = None if constant else []
            for r in range(self.num_relations):
                w, a = self.kernels(leaves, r, k)
                g = intermediate_representations(h, w)
                projected.append(g)
                if not constant:
                    logit_parts.append(
                        attention_logits(
                            g, tgt_parts[r], src_parts[r], a, self.logit_mode, self.slope
                        )
                    )
            att = attention_coefficients(logit_parts, edges, num_nodes, kind)
            values = concat_rows(
                [gather_rows(projected[r], src_parts[r]) for r in range(self.num_relations)]
            )
            messages = scale_rows(values, att.coefficients)
            agg = segment_reduce(messages, tgt_all, num_nodes, "sum")
            if self.use_bias:
                agg = add(agg, leaves[f"{self.name}.bias.k{k}"])
            head_sums.append(agg)

        if self.head_agg == "concat":
            outs = [_apply_activation(p, self.activation) for p in head_sums]
            return outs[0] if len(outs) == 1 else concat_cols(outs)
        acc = head_sums[0]
        for part in head_sums[1:]:
            acc = add(acc, part)
        return _apply_activation(mul(acc, 1.0 / self.heads), self.activation)


def rgcn_forward(
    edges: Sequence[tuple[np.ndarray, np.ndarray]],
    num_nodes: int,
    h: Tensor,
    kernels: Sequence[Tensor],
    *,
    activation: str = "identity",
    bias: Tensor | None = None,
) -> Tensor:
    """Uniform-coefficient relational propagation.

    Each relation contributes the mean of its projected neighbor features,
    weighting every neighbor by 1/|N_i^(r)|. Kept independent of the
    attention code on purpose so the two routes can be checked against each
    other.
    """
    if len(kernels) != len(edges):
        raise ValueError("one kernel per relation required")
    if not kernels:
        raise ValueError("at least one relation required")
    acc = None
    for (tgt, src), w in zip(edges, kernels):
        g = matmul(h, w)
        tgt = np.asarray(tgt, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        if tgt.size == 0:
            continue
        deg = np.bincount(tgt, minlength=num_nodes)
        alpha = 1.0 / deg[tgt]
        part = segment_reduce(
            scale_rows(gather_rows(g, src), alpha), tgt, num_nodes, "sum"
        )
        acc = part if acc is None else add(acc, part)
    if acc is None:
        acc = mul(matmul(h, kernels[0]), 0.0)
    if bias is not None:
        acc = add(acc, bias)
    return _apply_activation(acc, activation)


def degree_rgcn_forward(
    edges: tuple[np.ndarray, np.ndarray],
    num_nodes: int,
    h: Tensor,
    self_kernels: Sequence[Tensor],
    neighbor_kernels: Sequence[Tensor],
    biases: Sequence[Tensor],
    *,
    activation: str = "identity",
) -> Tensor:
    """Single-relation propagation with degree-specific kernels.

    Node i with in-degree d uses self kernel W_d on its own features, kernel
    U_d on the sum of its neighbors' features, plus bias b_d. Degrees above
    the largest provided index share the last kernel triple.
    """
    n_kernels = len(self_kernels)
    if n_kernels == 0 or len(neighbor_kernels) != n_kernels or len(biases) != n_kernels:
        raise ValueError("missing degree kernel: self/neighbor/bias lists must align")
    tgt = np.asarray(edges[0], dtype=np.int64)
    src = np.asarray(edges[1], dtype=np.int64)
    if num_nodes == 0:
        return _apply_activation(matmul(h, self_kernels[0]), activation)
    deg = np.bincount(tgt, minlength=num_nodes)
    deg = np.minimum(deg, n_kernels - 1)
    neighbor_sums = segment_reduce(gather_rows(h, src), tgt, num_nodes, "sum")
    parts = []
    order = []
    for d in np.unique(deg):
        idx = np.flatnonzero(deg == d)
        own = matmul(gather_rows(h, idx), self_kernels[d])
        nbr = matmul(gather_rows(neighbor_sums, idx), neighbor_kernels[d])
        parts.append(add(add(own, nbr), biases[d]))
        order.append(idx)
    stacked = parts[0] if len(parts) == 1 else concat_rows(parts)
    positions = np.empty(num_nodes, dtype=np.int64)
    positions[np.concatenate(order)] = np.arange(num_nodes)
    return _apply_activation(gather_rows(stacked, positions), activation)
