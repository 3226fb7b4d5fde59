import math

import numpy as np
import pytest

from civigraph.gradcheck import (
    TOLERANCE,
    check_batch_norm,
    check_bce,
    check_gat,
    check_leaky_relu,
    check_linear,
    check_relu,
    check_sigmoid,
    _random_graph,
)
from civigraph.graph_builder import finalize_graph
from civigraph.nn_core import (
    BatchNorm,
    Dropout,
    GATLayer,
    Linear,
    Parameter,
    adam_step,
    bce_loss,
    leaky_relu,
    relu,
    sigmoid,
)
from civigraph.rng import STREAM_GRADCHECK, derive_rng


class TestLinear:
    def test_identity(self):
        rng = np.random.default_rng(0)
        lin = Linear(3, 3, rng, "id", dtype=np.float64)
        lin.W.values = np.eye(3)
        lin.b.values = np.zeros(3)
        x = rng.standard_normal((4, 3))
        assert np.allclose(lin.forward(x), x)

    def test_hand_computed_2x2(self):
        rng = np.random.default_rng(0)
        lin = Linear(2, 2, rng, "h", dtype=np.float64)
        lin.W.values = np.array([[1.0, 2.0], [3.0, 4.0]])
        lin.b.values = np.array([0.5, -0.5])
        x = np.array([[1.0, 1.0]])
        y = lin.forward(x)
        # y = [1+3+0.5, 2+4-0.5]
        assert np.allclose(y, [[4.5, 5.5]])
        gy = np.array([[1.0, 1.0]])
        gx = lin.backward(gy)
        assert np.allclose(lin.W.grad, [[1.0, 1.0], [1.0, 1.0]])  # x^T gy
        assert np.allclose(lin.b.grad, [1.0, 1.0])
        assert np.allclose(gx, [[3.0, 7.0]])  # gy W^T

    def test_gradient_vs_finite_differences(self):
        result = check_linear(seed=3)
        assert result.max_rel_error <= TOLERANCE

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        lin = Linear(3, 2, rng, "s")
        with pytest.raises(ValueError, match="width"):
            lin.forward(np.zeros((1, 4)))


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_relu_negative(self):
        assert relu(np.array([-1.0]))[0] == 0.0
        assert leaky_relu(np.array([-1.0]), 0.2)[0] == pytest.approx(-0.2)

    def test_sigmoid_range(self):
        # float64 saturates to exactly 0/1 past |x| ~ 36.7; test inside it
        x = np.linspace(-36, 36, 101)
        y = sigmoid(x)
        assert np.all(y > 0) and np.all(y < 1)

    @pytest.mark.parametrize("check", [check_relu, check_leaky_relu, check_sigmoid])
    def test_gradients(self, check):
        assert check(seed=5).max_rel_error <= 1e-5


class TestBCE:
    def test_half_everywhere_is_ln2(self):
        y_hat = np.full(8, 0.5)
        y = np.array([0, 1] * 4, dtype=float)
        loss, _ = bce_loss(y_hat, y)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_prediction_hits_clamp_floor(self):
        y = np.array([1.0, 0.0])
        loss, grad = bce_loss(y, y)
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
        assert np.all(grad == 0.0)  # clamped coordinates get no gradient

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            bce_loss(np.zeros(3), np.zeros(4))

    def test_gradient_vs_finite_differences(self):
        assert check_bce(seed=7).max_rel_error <= 1e-5


class TestBatchNorm:
    def test_constant_column_becomes_shift(self):
        bn = BatchNorm(2, "bn", dtype=np.float64)
        bn.beta.values = np.array([3.0, -1.0])
        x = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
        y = bn.forward(x, "train")
        assert np.allclose(y[:, 0], 3.0)  # constant column -> 0 then shift

    def test_eval_with_unit_stats_is_identity(self):
        bn = BatchNorm(3, "bn", dtype=np.float64)
        x = np.random.default_rng(0).standard_normal((4, 3))
        y = bn.forward(x, "eval")
        assert np.allclose(y, x, atol=1e-2)  # eps shifts variance slightly
        bn.eps = 0.0
        assert np.allclose(bn.forward(x, "eval"), x, atol=1e-12)

    def test_train_moments(self):
        rng = np.random.default_rng(1)
        bn = BatchNorm(6, "bn", dtype=np.float64)
        x = 3.0 + 2.0 * rng.standard_normal((512, 6))
        y = bn.forward(x, "train")
        assert np.max(np.abs(y.mean(axis=0))) <= 1e-5
        assert np.max(np.abs(y.var(axis=0) - 1.0)) <= 1e-4

    def test_needs_two_rows(self):
        bn = BatchNorm(2, "bn")
        with pytest.raises(ValueError, match="at least 2"):
            bn.forward(np.ones((1, 2)), "train")

    def test_gradient_vs_finite_differences(self):
        assert check_batch_norm(seed=11).max_rel_error <= TOLERANCE

    def test_running_stats_update(self):
        bn = BatchNorm(1, "bn", momentum=0.5, dtype=np.float64)
        x = np.array([[0.0], [2.0]])  # mean 1, biased var 1, unbiased var 2
        bn.forward(x, "train")
        assert bn.running_mean[0] == pytest.approx(0.5)
        assert bn.running_var[0] == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)


class TestDropout:
    def test_p_zero_identity(self):
        rng = np.random.default_rng(0)
        drop = Dropout(0.0, rng)
        x = rng.standard_normal((5, 5))
        assert np.array_equal(drop.forward(x, "train"), x)

    def test_eval_identity(self):
        rng = np.random.default_rng(0)
        drop = Dropout(0.9, rng)
        x = rng.standard_normal((5, 5))
        assert np.array_equal(drop.forward(x, "eval"), x)

    def test_survivor_fraction_and_mean(self):
        rng = np.random.default_rng(1)
        drop = Dropout(0.5, rng)
        x = np.ones((1000, 1000))
        y = drop.forward(x, "train")
        survivors = np.count_nonzero(y) / y.size
        assert abs(survivors - 0.5) <= 0.01
        assert abs(y.mean() - 1.0) <= 0.01  # inverted scaling preserves the mean

    def test_backward_uses_same_mask(self):
        rng = np.random.default_rng(2)
        drop = Dropout(0.3, rng)
        x = np.ones((50, 50))
        y = drop.forward(x, "train")
        g = drop.backward(np.ones_like(x))
        assert np.array_equal(g, y)

    def test_invalid_p(self):
        with pytest.raises(ValueError, match="probability"):
            Dropout(1.0, np.random.default_rng(0))


class TestGATLayer:
    def test_single_node_self_loop_softmax_of_one(self):
        rng = np.random.default_rng(0)
        graph = finalize_graph((np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)), n=1)
        gat = GATLayer(3, 3, heads=1, rng=rng, name="g", dtype=np.float64)
        gat.W.values[0] = np.eye(3)
        x = np.array([[0.3, -0.7, 2.0]])
        out = gat.forward(x, graph)
        assert np.allclose(out, x)

    def test_two_identical_nodes_uniform_attention(self):
        rng = np.random.default_rng(1)
        graph = finalize_graph((np.array([0]), np.array([1]), np.array([0.97])), n=2)
        gat = GATLayer(2, 4, heads=2, rng=rng, name="g", dtype=np.float64)
        x = np.array([[1.0, 2.0], [1.0, 2.0]])
        gat.forward(x, graph)
        for _, _, alpha in gat._per_head:
            assert np.allclose(alpha, 0.5)  # beta=0, identical features

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        graph = _random_graph(rng, n=9, n_edges=20)
        gat = GATLayer(5, 4, heads=3, rng=rng, name="g", dtype=np.float64)
        gat.beta.values = rng.uniform(-1, 1, 3)
        gat.forward(rng.standard_normal((9, 5)), graph)
        dst = np.repeat(np.arange(9), np.diff(graph.row_offsets))
        for _, _, alpha in gat._per_head:
            sums = np.bincount(dst, weights=alpha, minlength=9)
            assert np.max(np.abs(sums - 1.0)) <= 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        n = 8
        graph = _random_graph(rng, n=n, n_edges=18)
        gat = GATLayer(4, 3, heads=2, rng=rng, name="g", dtype=np.float64)
        gat.beta.values = rng.uniform(-1, 1, 2)
        x = rng.standard_normal((n, 4))
        out = gat.forward(x, graph)

        perm = rng.permutation(n)
        inv = np.argsort(perm)
        # relabel the graph: node i becomes inv[i]... build edges under perm
        ii, jj, ww = [], [], []
        for i in range(n):
            for idx in range(graph.row_offsets[i], graph.row_offsets[i + 1]):
                j = graph.col_indices[idx]
                if i != j:
                    ii.append(inv[i])
                    jj.append(inv[int(j)])
                    ww.append(float(graph.edge_weights[idx]))
        pgraph = finalize_graph((np.array(ii), np.array(jj), np.array(ww)), n)
        pout = gat.forward(x[perm], pgraph)
        assert np.allclose(pout, out[perm], atol=1e-12)

    def test_gradient_vs_finite_differences(self):
        assert check_gat(seed=13).max_rel_error <= TOLERANCE

    def test_averaged_heads(self):
        rng = np.random.default_rng(4)
        graph = _random_graph(rng, n=5, n_edges=10)
        gat = GATLayer(3, 4, heads=2, rng=rng, name="g", concat=False, dtype=np.float64)
        out = gat.forward(rng.standard_normal((5, 3)), graph)
        assert out.shape == (5, 4)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = Parameter("w", np.array([1.0, -2.0]), dtype=np.float64)
        adam_step([p], lr=0.1, weight_decay=0.0, t=1)
        assert np.array_equal(p.values, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = Parameter("w", np.array([1.0]), dtype=np.float64)
        p.grad[:] = 0.5
        adam_step([p], lr=1e-3, weight_decay=0.0, t=1)
        # bias-corrected first step: lr * |g| / (|g| + eps)
        assert p.values[0] == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), abs=1e-12)

    def test_ten_steps_match_scalar_reference(self):
        # independent scalar Adam on f(w) = w^2, grad 2w, from w = 1
        w, m, v = 1.0, 0.0, 0.0
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        trajectory = []
        for t in range(1, 11):
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            trajectory.append(w)

        p = Parameter("w", np.array([1.0]), dtype=np.float64)
        for t in range(1, 11):
            p.grad[:] = 2.0 * p.values[0]
            adam_step([p], lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0, t=t)
            assert abs(p.values[0] - trajectory[t - 1]) <= 1e-10

    def test_lr_zero_is_noop(self):
        p = Parameter("w", np.array([3.0]), dtype=np.float64)
        p.grad[:] = 7.0
        adam_step([p], lr=0.0, weight_decay=5e-4, t=1)
        assert p.values[0] == 3.0

    def test_nonfinite_gradient_names_parameter(self):
        p = Parameter("layers.bad.W", np.array([1.0]), dtype=np.float64)
        p.grad[:] = np.nan
        with pytest.raises(ValueError, match="layers.bad.W"):
            adam_step([p], t=1)

    def test_decoupled_weight_decay(self):
        p = Parameter("w", np.array([2.0]), dtype=np.float64)
        adam_step([p], lr=0.1, weight_decay=0.01, t=1)
        assert p.values[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)

    def test_float32_storage_rounds(self):
        p = Parameter("w", np.array([1.0]), dtype=np.float32)
        p.grad[:] = 1e-3
        adam_step([p], lr=1e-3, weight_decay=0.0, t=1)
        assert p.values.dtype == np.float32


def test_parameter_buffers_share_shape():
    rng = derive_rng(0, STREAM_GRADCHECK, 99)
    p = Parameter("p", rng.standard_normal((3, 4)))
    assert p.grad.shape == p.adam_m.shape == p.adam_v.shape == p.values.shape
    p.grad[:] = 1.0
    p.zero_grad()
    assert np.all(p.grad == 0.0)
