import json

import numpy as np
import pytest
from helpers import dense_reference_graph, dense_similarity, graphs_equal, random_unit_embeddings

from civigraph.data_pipeline import EmbeddingMatrix, l2_normalize
from civigraph.graph_builder import (
    GraphConfig,
    GraphFormatError,
    build_graph,
    connected_components,
    ensure_min_connectivity,
    finalize_graph,
    graph_stats,
    load_graph,
    pairwise_similarity_block,
    save_graph,
    threshold_edges,
)


def unit_rows(rows) -> EmbeddingMatrix:
    values = np.asarray(rows, dtype=np.float32)
    return l2_normalize(EmbeddingMatrix(values=values, row_ids=np.arange(len(values), dtype=np.uint64)))


class TestPairwiseSimilarity:
    def test_identical_rows_give_one(self):
        m = unit_rows([[1, 0, 0], [1, 0, 0]])
        block = pairwise_similarity_block(m, range(0, 2))
        assert block[0, 1] == pytest.approx(1.0, abs=1e-7)

    def test_orthogonal_rows_give_zero(self):
        m = unit_rows([[1, 0, 0], [0, 1, 0]])
        block = pairwise_similarity_block(m, range(0, 2))
        assert block[0, 1] == pytest.approx(0.0, abs=1e-7)

    def test_hand_dot_product(self):
        m = unit_rows([[0.6, 0.8], [0.8, 0.6]])
        block = pairwise_similarity_block(m, range(0, 2))
        assert block[0, 1] == pytest.approx(0.96, abs=1e-6)

    def test_rejects_unnormalized(self):
        m = EmbeddingMatrix(values=2 * np.eye(3, dtype=np.float32), row_ids=np.arange(3, dtype=np.uint64))
        with pytest.raises(ValueError, match="normalize"):
            pairwise_similarity_block(m, range(0, 3))

    def test_clamped_to_unit_interval(self):
        rng = np.random.default_rng(0)
        m = random_unit_embeddings(rng, 40, 4, duplicates=3)
        block = pairwise_similarity_block(m, range(0, 40))
        assert block.max() <= 1.0 and block.min() >= -1.0

    def test_matches_einsum_reference(self):
        rng = np.random.default_rng(1)
        m = random_unit_embeddings(rng, 25, 7)
        block = pairwise_similarity_block(m, range(5, 15))
        v = m.values.astype(np.float64)
        reference = np.einsum("id,jd->ij", v[5:15], v)
        assert np.max(np.abs(block - np.clip(reference, -1, 1))) < 1e-12


class TestThresholdEdges:
    def test_orthogonal_vectors_no_edges(self):
        m = unit_rows(np.eye(4))
        block = pairwise_similarity_block(m, range(0, 4))
        ii, jj, ww = threshold_edges(block, tau=0.9)
        assert ii.size == 0

    def test_duplicate_rows_edge_weight_one(self):
        m = unit_rows([[1, 0], [1, 0]])
        block = pairwise_similarity_block(m, range(0, 2))
        ii, jj, ww = threshold_edges(block, tau=0.9)
        assert sorted(zip(ii.tolist(), jj.tolist())) == [(0, 1), (1, 0)]
        assert np.all(ww == 1.0)

    def test_strictly_above_tau(self):
        block = np.array([[1.0, 0.9], [0.9, 1.0]])
        ii, jj, ww = threshold_edges(block, tau=0.9)
        assert ii.size == 0  # 0.9 > 0.9 is false

    def test_matches_brute_force_filter(self):
        rng = np.random.default_rng(2)
        m = random_unit_embeddings(rng, 10, 6)
        tau = 0.2
        block = pairwise_similarity_block(m, range(0, 10))
        ii, jj, _ = threshold_edges(block, tau)
        got = set(zip(ii.tolist(), jj.tolist()))
        expected = {
            (i, j)
            for i in range(10)
            for j in range(10)
            if i != j and block[i, j] > tau
        }
        assert got == expected


class TestEnsureMinConnectivity:
    def test_isolated_node_gains_exactly_k(self):
        rows = np.eye(6)
        m = unit_rows(rows)
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        ii, jj, ww = ensure_min_connectivity(empty, m, k_min=5)
        assert np.sum(ii == 0) == 5
        assert set(jj[ii == 0].tolist()) == {1, 2, 3, 4, 5}

    def test_satisfied_node_untouched(self):
        # node 0 already has 7 above-threshold neighbors in the edge list
        rng = np.random.default_rng(3)
        m = random_unit_embeddings(rng, 8, 4)
        ii = np.array([0] * 7 + [1] * 5 + [2] * 5 + [3] * 5 + [4] * 5 + [5] * 5 + [6] * 5 + [7] * 5, dtype=np.int64)
        jj = np.concatenate([[j for j in range(8) if j != i][:k] for i, k in
                             zip(range(8), [7, 5, 5, 5, 5, 5, 5, 5])]).astype(np.int64)
        ww = np.full(ii.size, 0.95)
        out_i, out_j, _ = ensure_min_connectivity((ii, jj, ww), m, k_min=5)
        assert out_i.size == ii.size  # nothing added anywhere

    def test_matches_per_node_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        m = random_unit_embeddings(rng, 50, 8, duplicates=4)
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        k = 5
        ii, jj, _ = ensure_min_connectivity(empty, m, k_min=k)
        S = dense_similarity(m, block_size=1024)
        for i in range(50):
            sims = [(-S[i, j], j) for j in range(50) if j != i]
            expected = {j for _, j in sorted(sims)[:k]}
            assert set(jj[ii == i].tolist()) == expected, f"node {i}"

    def test_tie_break_prefers_lower_index(self):
        # nodes 2 and 3 are identical, equally similar to node 0; only one slot
        base = np.array([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [0.7, 0.7]])
        m = unit_rows(base)
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        ii, jj, _ = ensure_min_connectivity(empty, m, k_min=1)
        assert jj[ii == 0].tolist() == [2]

    def test_k_min_must_be_below_node_count(self):
        m = unit_rows(np.eye(3))
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        with pytest.raises(ValueError, match="k_min"):
            ensure_min_connectivity(empty, m, k_min=3)


class TestFinalizeGraph:
    def test_single_directed_edge_symmetrized(self):
        edges = (np.array([0]), np.array([1]), np.array([0.95]))
        g = finalize_graph(edges, n=2)
        pairs = set()
        for i in range(2):
            for j in g.neighbors(i):
                pairs.add((i, int(j)))
        assert pairs == {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert g.edge_weights[g.col_indices == 0][0] == pytest.approx(1.0)

    def test_empty_edges_only_self_loops(self):
        empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        g = finalize_graph(empty, n=3)
        assert g.n_entries == 3
        assert np.array_equal(g.col_indices, [0, 1, 2])
        assert np.all(g.edge_weights == 1.0)

    def test_random_edges_dense_symmetrization_oracle(self):
        rng = np.random.default_rng(5)
        n = 20
        ii = rng.integers(0, n, 60)
        jj = rng.integers(0, n, 60)
        keep = ii != jj
        ww = rng.uniform(-1, 1, keep.sum())
        g = finalize_graph((ii[keep], jj[keep], ww), n)
        dense = np.zeros((n, n))
        present = np.zeros((n, n), dtype=bool)
        for a, b, w in zip(ii[keep], jj[keep], ww):
            for x, y in ((a, b), (b, a)):
                present[x, y] = True
                dense[x, y] = max(dense[x, y], w) if present[x, y] and dense[x, y] != 0 else w
        # oracle: adjacency must equal its transpose and CSR must match it
        dense_sym = np.maximum(np.where(present, dense, -np.inf), np.where(present, dense, -np.inf).T)
        np.fill_diagonal(dense_sym, 1.0)
        assert np.array_equal(dense_sym > -np.inf, (dense_sym > -np.inf).T)
        for i in range(n):
            cols = g.neighbors(i)
            assert np.array_equal(np.flatnonzero(dense_sym[i] > -np.inf), cols)
            assert np.allclose(g.edge_weights[g.row_offsets[i]:g.row_offsets[i + 1]],
                               dense_sym[i][cols].astype(np.float32))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            finalize_graph((np.array([5]), np.array([0]), np.array([0.99])), n=3)


class TestBuildGraph:
    def test_pair_plus_orphan(self):
        m = unit_rows([[1, 0], [1, 0], [0, 1]])
        g = build_graph(m, GraphConfig(tau=0.9, k_min=1, block_size=2))
        # 0-1 from the threshold; the orphan 2 falls back to node 0 (tie
        # between equally-dissimilar 0 and 1 breaks to the lower index)
        assert set(g.neighbors(0).tolist()) == {0, 1, 2}
        assert set(g.neighbors(1).tolist()) == {0, 1}
        assert set(g.neighbors(2).tolist()) == {0, 2}
        dense = {(i, int(j)): float(w) for i in range(3)
                 for j, w in zip(g.neighbors(i), g.edge_weights[g.row_offsets[i]:g.row_offsets[i + 1]])}
        assert dense[(0, 1)] == 1.0
        assert dense[(0, 2)] == 0.0  # fallback edge carries the raw similarity

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            n = int(rng.integers(20, 201))
            d = int(rng.integers(3, 17))
            m = random_unit_embeddings(rng, n, d, duplicates=int(rng.integers(0, 4)))
            cfg = GraphConfig(tau=float(rng.uniform(0.2, 0.95)), k_min=int(rng.integers(1, 7)),
                              block_size=int(rng.integers(8, 64)))
            built = build_graph(m, cfg)
            reference = dense_reference_graph(m, cfg)
            assert graphs_equal(built, reference), f"trial {trial}"

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        m = random_unit_embeddings(rng, 60, 8)
        cfg = GraphConfig(tau=0.5, k_min=3, block_size=16)
        assert graphs_equal(build_graph(m, cfg), build_graph(m, cfg))

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(8)
        m = random_unit_embeddings(rng, 120, 8)
        cfg = GraphConfig(tau=0.4, k_min=4, block_size=16)
        assert graphs_equal(build_graph(m, cfg, threads=1), build_graph(m, cfg, threads=4))

    def test_invariants(self):
        rng = np.random.default_rng(9)
        m = random_unit_embeddings(rng, 80, 6)
        cfg = GraphConfig(tau=0.6, k_min=4)
        g = build_graph(m, cfg)
        # symmetry with equal weights
        dense = np.full((80, 80), np.nan)
        for i in range(80):
            cols = g.neighbors(i)
            dense[i, cols] = g.edge_weights[g.row_offsets[i]:g.row_offsets[i + 1]]
        mask = ~np.isnan(dense)
        assert np.array_equal(mask, mask.T)
        assert np.array_equal(dense[mask], dense.T[mask])
        # min degree, self loops, clamping
        assert g.degrees().min() >= cfg.k_min
        assert np.all(np.abs(g.edge_weights) <= 1.0)
        diag = [dense[i, i] for i in range(80)]
        assert np.all(np.asarray(diag) == 1.0)

    def test_too_few_nodes_rejected(self):
        m = unit_rows(np.eye(3))
        with pytest.raises(ValueError, match="at least"):
            build_graph(m, GraphConfig(tau=0.9, k_min=5))


class TestGraphFile:
    def test_roundtrip_and_byte_identical_rerun(self, tmp_path):
        rng = np.random.default_rng(10)
        m = random_unit_embeddings(rng, 40, 5)
        g = build_graph(m, GraphConfig(tau=0.5, k_min=2))
        p1, p2 = tmp_path / "a.grf1", tmp_path / "b.grf1"
        save_graph(g, p1)
        save_graph(g, p2)
        assert p1.read_bytes() == p2.read_bytes()
        back = load_graph(p1)
        assert graphs_equal(g, back)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.grf1"
        p.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(GraphFormatError, match="magic"):
            load_graph(p)

    def test_size_mismatch(self, tmp_path):
        import struct

        p = tmp_path / "short.grf1"
        p.write_bytes(struct.pack("<4sIQ", b"GRF1", 4, 100))
        with pytest.raises(GraphFormatError, match="expected"):
            load_graph(p)


class TestGraphStats:
    def test_known_graph(self):
        m = unit_rows([[1, 0], [1, 0], [0, 1], [0, 1]])
        g = build_graph(m, GraphConfig(tau=0.9, k_min=1, block_size=2))
        stats = graph_stats(g, tau=0.9)
        assert stats["n_nodes"] == 4
        assert stats["connected_components"] == 2
        assert stats["edges_undirected"] == 2
        assert stats["fallback_edges"] == 0  # both pairs are above-threshold
        assert stats["min_degree"] >= 1
        assert json.dumps(stats)  # sidecar must be JSON-serializable

    def test_fallback_counted(self):
        m = unit_rows(np.eye(5))
        g = build_graph(m, GraphConfig(tau=0.9, k_min=2, block_size=2))
        stats = graph_stats(g, tau=0.9)
        assert stats["threshold_edges"] == 0
        assert stats["fallback_edges"] == stats["edges_undirected"] > 0

    def test_components_on_disconnected(self):
        g = finalize_graph((np.array([0]), np.array([1]), np.array([0.95])), n=4)
        assert connected_components(g) == 3
