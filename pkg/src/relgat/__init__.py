"""Relational graph attention toolkit.

Attention layers over multi-relational graphs, node and graph classifiers
built from them, a deterministic training loop, random hyperparameter
search, and the rank statistics used to compare model variants.
"""

__version__ = "0.1.0"

from .graph import (
    BatchedGraph,
    GraphFormatError,
    GraphTask,
    LabelSet,
    NodeTask,
    RelGraph,
    Split,
    batch_graphs,
    build_graph,
    generate_planted,
    parse_dataset,
    parse_graph,
    serialize_dataset,
    serialize_graph,
    with_self_relation,
)
from .layers import (
    AttentionResult,
    RgatLayer,
    attention_coefficients,
    attention_logits,
    compose_kernels,
    degree_rgcn_forward,
    rgcn_forward,
)
from .models import (
    GraphClassifier,
    GraphClassifierConfig,
    NodeClassifier,
    NodeClassifierConfig,
    graph_gather,
    inverse_frequency_weights,
    load_checkpoint,
    masked_cross_entropy,
    save_checkpoint,
    weighted_cross_entropy,
)
from .search import (
    LogUniform,
    MultiplesOf,
    OneOf,
    Uniform,
    inductive_space,
    run_sweep,
    sample_config,
    transductive_space,
)
from .stats import (
    EmpiricalCdf,
    MannWhitneyResult,
    empirical_cdf,
    mann_whitney_u,
    midranks,
    pairwise_pvalues,
)
from .tensor import (
    GradientMap,
    KinkError,
    Tape,
    Tensor,
    grad_check,
)
from .training import (
    DivergenceError,
    TrainConfig,
    TrainResult,
    evaluate,
    kfold_split,
    roc_auc,
    train,
)

__all__ = [
    "AttentionResult",
    "BatchedGraph",
    "DivergenceError",
    "EmpiricalCdf",
    "GradientMap",
    "GraphClassifier",
    "GraphClassifierConfig",
    "GraphFormatError",
    "GraphTask",
    "KinkError",
    "LabelSet",
    "LogUniform",
    "MannWhitneyResult",
    "MultiplesOf",
    "NodeClassifier",
    "NodeClassifierConfig",
    "NodeTask",
    "OneOf",
    "RelGraph",
    "RgatLayer",
    "Split",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "Uniform",
    "attention_coefficients",
    "attention_logits",
    "batch_graphs",
    "build_graph",
    "compose_kernels",
    "degree_rgcn_forward",
    "empirical_cdf",
    "evaluate",
    "generate_planted",
    "grad_check",
    "graph_gather",
    "inductive_space",
    "inverse_frequency_weights",
    "kfold_split",
    "load_checkpoint",
    "mann_whitney_u",
    "masked_cross_entropy",
    "midranks",
    "pairwise_pvalues",
    "parse_dataset",
    "parse_graph",
    "rgcn_forward",
    "roc_auc",
    "run_sweep",
    "sample_config",
    "save_checkpoint",
    "serialize_dataset",
    "serialize_graph",
    "train",
    "transductive_space",
    "weighted_cross_entropy",
    "with_self_relation",
]
