"""Similarity-graph construction over unit-normalized embeddings.

Pipeline: blocked pairwise cosine similarity -> strict threshold edges ->
top-k fallback for under-connected nodes -> symmetrize + self-loops ->
compressed sparse rows. Similarities accumulate in float64 over the float32
inputs; stored edge weights are float32, matching the GRF1 file format.
"""

from __future__ import annotations

import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from civigraph.data_pipeline import EmbeddingMatrix
from civigraph.fileio import atomic_write_bytes

GRAPH_MAGIC = b"GRF1"

EdgeList = tuple[np.ndarray, np.ndarray, np.ndarray]  # (src, dst, weight)


class GraphFormatError(ValueError):
    """Malformed GRF1 file."""


@dataclass
class GraphConfig:
    tau: float = 0.9
    k_min: int = 5
    block_size: int = 1024

    def __post_init__(self):
        if not (-1.0 < self.tau <= 1.0):
            raise ValueError(f"tau must be in (-1, 1], got {self.tau}")
        if self.k_min < 1:
            raise ValueError(f"k_min must be positive, got {self.k_min}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be positive, got {self.block_size}")


@dataclass
class CommentGraph:
    """Symmetric weighted adjacency in CSR form, self-loop at every node."""

    n_nodes: int
    row_offsets: np.ndarray  # int64, length n_nodes + 1
    col_indices: np.ndarray  # int64, sorted within each row
    edge_weights: np.ndarray  # float32, aligned with col_indices
    node_ids: np.ndarray  # uint64 comment id per node
    _edge_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_entries(self) -> int:
        return int(self.col_indices.shape[0])

    def degrees(self, include_self_loops: bool = False) -> np.ndarray:
        deg = np.diff(self.row_offsets)
        return deg if include_self_loops else deg - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i] : self.row_offsets[i + 1]]

    def validate(self) -> None:
        n = self.n_nodes
        if self.row_offsets.shape != (n + 1,) or self.row_offsets[0] != 0:
            raise ValueError("bad row_offsets")
        if self.row_offsets[-1] != self.n_entries or self.edge_weights.shape != self.col_indices.shape:
            raise ValueError("offsets/entries mismatch")
        for i in range(n):
            cols = self.neighbors(i)
            if cols.size == 0 or np.any(np.diff(cols) <= 0):
                raise ValueError(f"row {i} not strictly sorted or empty")
            if i not in cols:
                raise ValueError(f"row {i} missing self-loop")


def _similarity_strip(m64: np.ndarray, start: int, stop: int) -> np.ndarray:
    block = m64[start:stop] @ m64.T
    np.clip(block, -1.0, 1.0, out=block)
    return block


def _check_normalized(values: np.ndarray, tol: float = 1e-3) -> None:
    v64 = values.astype(np.float64)
    norms = np.sqrt((v64 * v64).sum(axis=1))
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(
            f"{bad.size} rows are not unit-normalized (first: {bad[:5].tolist()}); "
            "run l2_normalize first"
        )


def pairwise_similarity_block(m: EmbeddingMatrix, rows: range) -> np.ndarray:
    """Dense block of cosine similarities block[i][j] = <x_rows[i], x_j>,
    clamped to [-1, 1]. Requires unit-normalized input."""
    if len(rows) == 0:
        raise ValueError("empty row range")
    if rows.step != 1 or rows.start < 0 or rows.stop > m.n_rows:
        raise ValueError(f"row range {rows} out of bounds for {m.n_rows} rows")
    _check_normalized(m.values)
    return _similarity_strip(m.values.astype(np.float64), rows.start, rows.stop)


def threshold_edges(block: np.ndarray, tau: float, row_start: int = 0) -> EdgeList:
    """Edges (i, j, s_ij) with s_ij strictly above tau, excluding i == j.

    `block` holds similarity rows for global nodes row_start..row_start+B.
    """
    local, jj = np.nonzero(block > tau)
    ii = local + row_start
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    return ii.astype(np.int64), jj.astype(np.int64), block[local[keep], jj]


def ensure_min_connectivity(edges: EdgeList, m: EmbeddingMatrix, k_min: int, block_size: int = 1024) -> EdgeList:
    """Attach every node with fewer than k_min threshold neighbors to its
    k_min most-similar other nodes (ties broken toward the lower index).

    Similarity rows are recomputed in the same block shape the threshold
    pass uses, so a rerun (or a reference builder fed the same blocks)
    reproduces identical weights bit for bit.
    """
    n = m.n_rows
    if k_min >= n:
        raise ValueError(f"k_min={k_min} must be below the node count {n}")
    ii, jj, ww = edges
    deg = np.bincount(ii, minlength=n)
    deficient_mask = deg < k_min
    if not deficient_mask.any():
        return edges

    existing_keys = ii[deficient_mask[ii]] * np.int64(n) + jj[deficient_mask[ii]]
    m64 = m.values.astype(np.float64)
    add_i: list[np.ndarray] = []
    add_j: list[np.ndarray] = []
    add_w: list[np.ndarray] = []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        nodes = np.flatnonzero(deficient_mask[start:stop]) + start
        if nodes.size == 0:
            continue
        strip = _similarity_strip(m64, start, stop)
        sims = strip[nodes - start]
        sims[np.arange(nodes.size), nodes] = -np.inf
        # stable argsort on the negated row: equal similarities keep
        # ascending column order, i.e. ties go to the lower node index
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k_min]
        src = np.repeat(nodes, k_min)
        dst = top.ravel()
        new = ~np.isin(src * np.int64(n) + dst, existing_keys)
        add_i.append(src[new])
        add_j.append(dst[new])
        add_w.append(sims[np.repeat(np.arange(nodes.size), k_min), dst][new])
    return (
        np.concatenate([ii] + add_i),
        np.concatenate([jj] + add_j),
        np.concatenate([ww] + add_w),
    )


def finalize_graph(edges: EdgeList, n: int, node_ids: np.ndarray | None = None) -> CommentGraph:
    """Symmetrize, deduplicate keeping the max weight, add unit self-loops,
    and pack into sorted CSR."""
    ii, jj, ww = edges
    if ii.size and (ii.max() >= n or jj.max() >= n or ii.min() < 0 or jj.min() < 0):
        raise ValueError("edge endpoint out of range")
    loops = np.arange(n, dtype=np.int64)
    all_i = np.concatenate([ii, jj, loops])
    all_j = np.concatenate([jj, ii, loops])
    all_w = np.concatenate([ww, ww, np.ones(n, dtype=np.float64)])

    key = all_i * np.int64(n) + all_j
    order = np.argsort(key, kind="stable")
    key, all_i, all_j, all_w = key[order], all_i[order], all_j[order], all_w[order]
    starts = np.flatnonzero(np.concatenate([[True], key[1:] != key[:-1]]))
    out_i = all_i[starts]
    out_j = all_j[starts]
    out_w = np.maximum.reduceat(all_w, starts)

    row_offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(out_i, minlength=n), out=row_offsets[1:])
    if node_ids is None:
        node_ids = np.arange(n, dtype=np.uint64)
    return CommentGraph(
        n_nodes=n,
        row_offsets=row_offsets,
        col_indices=out_j.astype(np.int64),
        edge_weights=out_w.astype(np.float32),
        node_ids=np.asarray(node_ids, dtype=np.uint64),
    )


def build_graph(m: EmbeddingMatrix, cfg: GraphConfig, threads: int = 1) -> CommentGraph:
    """Full construction over all rows of `m` (see module docstring)."""
    n = m.n_rows
    if n < cfg.k_min + 1:
        raise ValueError(f"need at least k_min+1={cfg.k_min + 1} nodes, got {n}")
    _check_normalized(m.values)
    m64 = m.values.astype(np.float64)

    starts = list(range(0, n, cfg.block_size))

    def block_edges(start: int) -> EdgeList:
        block = _similarity_strip(m64, start, min(start + cfg.block_size, n))
        return threshold_edges(block, cfg.tau, row_start=start)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block_edges, starts))
    else:
        parts = [block_edges(s) for s in starts]

    edges = (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )
    edges = ensure_min_connectivity(edges, m, cfg.k_min, block_size=cfg.block_size)
    return finalize_graph(edges, n, node_ids=m.row_ids)


def connected_components(graph: CommentGraph) -> int:
    """Number of connected components (BFS over the CSR adjacency)."""
    seen = np.zeros(graph.n_nodes, dtype=bool)
    count = 0
    for root in range(graph.n_nodes):
        if seen[root]:
            continue
        count += 1
        queue = deque([root])
        seen[root] = True
        while queue:
            u = queue.popleft()
            for v in graph.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    queue.append(int(v))
    return count


def graph_stats(graph: CommentGraph, tau: float) -> dict:
    """Degree histogram, component count, and edge tallies for the sidecar.

    Fallback edges are exactly the non-self-loop edges at or below tau,
    since threshold edges are strictly above it.
    """
    deg = graph.degrees(include_self_loops=False)
    hist: dict[str, int] = {}
    for d, c in zip(*np.unique(deg, return_counts=True)):
        hist[str(int(d))] = int(c)
    self_mask = graph.col_indices == np.repeat(np.arange(graph.n_nodes), np.diff(graph.row_offsets))
    nonself = ~self_mask
    undirected = int(nonself.sum()) // 2
    fallback = int((nonself & (graph.edge_weights <= tau)).sum()) // 2
    return {
        "n_nodes": graph.n_nodes,
        "csr_entries": graph.n_entries,
        "edges_undirected": undirected,
        "threshold_edges": undirected - fallback,
        "fallback_edges": fallback,
        "self_loops": graph.n_nodes,
        "min_degree": int(deg.min()) if deg.size else 0,
        "max_degree": int(deg.max()) if deg.size else 0,
        "mean_degree": float(deg.mean()) if deg.size else 0.0,
        "degree_histogram": hist,
        "connected_components": connected_components(graph),
    }


def save_graph(graph: CommentGraph, path: str | Path) -> None:
    """Write the GRF1 binary format: magic | u32 n | u64 entries |
    row_offsets u64 | col_indices u32 | weights f32 | node_ids u64."""
    header = struct.pack("<4sIQ", GRAPH_MAGIC, graph.n_nodes, graph.n_entries)
    payload = (
        header
        + np.ascontiguousarray(graph.row_offsets, dtype="<u8").tobytes()
        + np.ascontiguousarray(graph.col_indices, dtype="<u4").tobytes()
        + np.ascontiguousarray(graph.edge_weights, dtype="<f4").tobytes()
        + np.ascontiguousarray(graph.node_ids, dtype="<u8").tobytes()
    )
    atomic_write_bytes(path, payload)


def load_graph(path: str | Path) -> CommentGraph:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise GraphFormatError(f"{path}: shorter than the 16-byte header")
    magic, n, entries = struct.unpack_from("<4sIQ", data, 0)
    if magic != GRAPH_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    expected = 16 + 8 * (n + 1) + 4 * entries + 4 * entries + 8 * n
    if len(data) != expected:
        raise GraphFormatError(f"{path}: expected {expected} bytes for n={n}, entries={entries}, got {len(data)}")
    off = 16
    row_offsets = np.frombuffer(data, dtype="<u8", count=n + 1, offset=off).astype(np.int64)
    off += 8 * (n + 1)
    col_indices = np.frombuffer(data, dtype="<u4", count=entries, offset=off).astype(np.int64)
    off += 4 * entries
    weights = np.frombuffer(data, dtype="<f4", count=entries, offset=off).astype(np.float32)
    off += 4 * entries
    node_ids = np.frombuffer(data, dtype="<u8", count=n, offset=off).copy()
    graph = CommentGraph(n, row_offsets, col_indices, weights, node_ids)
    graph.validate()
    return graph
