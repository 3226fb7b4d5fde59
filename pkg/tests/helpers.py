"""Shared test oracles and fixture builders.

The dense reference builder reimplements the whole graph construction with
dense boolean-matrix logic. It consumes the same row-block similarity
kernel as the production builder (BLAS results are not bit-reproducible
across different strip heights), so any disagreement isolates a bug in the
thresholding, fallback, symmetrization or CSR packing.
"""

from __future__ import annotations

import numpy as np

from civigraph.data_pipeline import EmbeddingMatrix, l2_normalize
from civigraph.graph_builder import CommentGraph, GraphConfig, _similarity_strip


def dense_similarity(emb: EmbeddingMatrix, block_size: int) -> np.ndarray:
    m64 = emb.values.astype(np.float64)
    n = emb.n_rows
    return np.vstack([_similarity_strip(m64, s, min(s + block_size, n)) for s in range(0, n, block_size)])


def dense_reference_graph(emb: EmbeddingMatrix, cfg: GraphConfig) -> CommentGraph:
    """O(N^2) construction: full matrix, dense masks, per-row top-k."""
    n = emb.n_rows
    S = dense_similarity(emb, cfg.block_size)

    above = S > cfg.tau
    np.fill_diagonal(above, False)
    neighbor = above.copy()
    S_ranked = S.copy()
    np.fill_diagonal(S_ranked, -np.inf)
    for i in range(n):
        if above[i].sum() < cfg.k_min:
            top = np.argsort(-S_ranked[i], kind="stable")[: cfg.k_min]
            neighbor[i, top] = True

    adjacency = neighbor | neighbor.T
    weights = np.maximum(S, S.T)
    np.fill_diagonal(adjacency, True)
    np.fill_diagonal(weights, 1.0)

    row_offsets = [0]
    cols = []
    vals = []
    for i in range(n):
        js = np.flatnonzero(adjacency[i])
        cols.append(js)
        vals.append(weights[i, js])
        row_offsets.append(row_offsets[-1] + js.size)
    return CommentGraph(
        n_nodes=n,
        row_offsets=np.asarray(row_offsets, dtype=np.int64),
        col_indices=np.concatenate(cols).astype(np.int64),
        edge_weights=np.concatenate(vals).astype(np.float32),
        node_ids=emb.row_ids.copy(),
    )


def graphs_equal(a: CommentGraph, b: CommentGraph) -> bool:
    return (
        a.n_nodes == b.n_nodes
        and np.array_equal(a.row_offsets, b.row_offsets)
        and np.array_equal(a.col_indices, b.col_indices)
        and np.array_equal(a.edge_weights, b.edge_weights)
        and np.array_equal(a.node_ids, b.node_ids)
    )


def random_unit_embeddings(rng: np.random.Generator, n: int, d: int, duplicates: int = 0) -> EmbeddingMatrix:
    """Random unit vectors; optionally clone a few rows to force exact ties."""
    values = rng.standard_normal((n, d)).astype(np.float32)
    for k in range(duplicates):
        values[n - 1 - k] = values[k % max(1, n - duplicates)]
    return l2_normalize(EmbeddingMatrix(values=values, row_ids=np.arange(n, dtype=np.uint64)))


def pair_counting_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Brute-force AUC: fraction of (pos, neg) pairs ranked correctly, ties half."""
    pos = np.asarray(scores)[np.asarray(labels) == 1]
    neg = np.asarray(scores)[np.asarray(labels) == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def two_cluster_dataset(
    rng: np.random.Generator, n: int, d: int, noise: float = 0.25
) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Linearly separable two-cluster unit vectors with labels by cluster."""
    anchor_a = np.zeros(d)
    anchor_a[0] = 1.0
    anchor_b = np.zeros(d)
    anchor_b[1] = 1.0
    labels = (np.arange(n) % 2).astype(np.int64)
    points = np.where(labels[:, None] == 1, anchor_b, anchor_a) + noise * rng.standard_normal((n, d))
    emb = l2_normalize(EmbeddingMatrix(values=points.astype(np.float32), row_ids=np.arange(n, dtype=np.uint64)))
    return emb, labels


def synthetic_partitions(seed: int, n: int, d: int, noise: float = 0.25, tau: float = 0.8, k_min: int = 3):
    """Two-cluster data split 8:1:1 with one graph per partition.

    Returns (graphs, features, labels) dicts keyed 'train'/'val'/'test',
    plus the full embedding matrix and split dataset for file fixtures.
    """
    from civigraph.data_pipeline import Split, split_dataset
    from civigraph.graph_builder import build_graph
    from civigraph.rng import STREAM_SYNTH, derive_rng

    rng = derive_rng(seed, STREAM_SYNTH)
    emb, labels_arr = two_cluster_dataset(rng, n, d, noise)
    label_map = {i: int(labels_arr[i]) for i in range(n)}
    dataset = split_dataset(list(range(n)), label_map, seed=seed)
    cfg = GraphConfig(tau=tau, k_min=k_min, block_size=64)

    graphs, features, labels = {}, {}, {}
    for split in Split:
        ids = np.asarray(dataset.ids_for(split))
        part = EmbeddingMatrix(values=emb.values[ids], row_ids=emb.row_ids[ids])
        graphs[split.value] = build_graph(part, cfg)
        features[split.value] = part.values
        labels[split.value] = np.array([label_map[i] for i in ids], dtype=np.int64)
    return graphs, features, labels, emb, dataset
