"""Graph-based incivility classification.

Builds cosine-similarity graphs over sentence-embedded comments and trains
a hybrid GAT + MLP model with per-node attention fusion to predict binary
attack / aggression / toxicity labels.
"""

__version__ = "0.1.0"

from civigraph.data_pipeline import (
    AnnotationSet,
    CommentRecord,
    EmbeddingMatrix,
    LabeledDataset,
    Namespace,
    Split,
    Task,
    aggregate_labels,
    balance_dataset,
    l2_normalize,
    load_embeddings,
    parse_corpus,
    save_embeddings,
    split_dataset,
)
from civigraph.graph_builder import (
    CommentGraph,
    GraphConfig,
    build_graph,
    graph_stats,
    load_graph,
    save_graph,
)
from civigraph.hybrid_model import HybridModel, ModelConfig, load_checkpoint, save_checkpoint
from civigraph.trainer_eval import EvalReport, TrainConfig, auc_roc, evaluate, train

__all__ = [
    "AnnotationSet",
    "CommentGraph",
    "CommentRecord",
    "EmbeddingMatrix",
    "EvalReport",
    "GraphConfig",
    "HybridModel",
    "LabeledDataset",
    "ModelConfig",
    "Namespace",
    "Split",
    "Task",
    "TrainConfig",
    "aggregate_labels",
    "auc_roc",
    "balance_dataset",
    "build_graph",
    "evaluate",
    "graph_stats",
    "l2_normalize",
    "load_checkpoint",
    "load_embeddings",
    "load_graph",
    "parse_corpus",
    "save_checkpoint",
    "save_embeddings",
    "save_graph",
    "split_dataset",
    "train",
]
