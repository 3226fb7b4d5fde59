"""Differentiable layer primitives with hand-written reverse-mode gradients.

All math runs in float64; parameter values live in a configurable storage
dtype (float32 by default, so checkpoints round-trip bit-exactly; float64
for finite-difference checks). Layers cache their forward activations and
expose ``backward(grad_out) -> grad_in``, accumulating parameter gradients
into ``Parameter.grad``.
"""

from __future__ import annotations

import numpy as np

from civigraph.graph_builder import CommentGraph

F64 = np.float64


class Parameter:
    """A trainable array plus its gradient and Adam moment buffers."""

    def __init__(self, name: str, values: np.ndarray, dtype=np.float32):
        self.name = name
        self.values = np.asarray(values, dtype=dtype)
        self.grad = np.zeros(self.values.shape, dtype=F64)
        self.adam_m = np.zeros(self.values.shape, dtype=F64)
        self.adam_v = np.zeros(self.values.shape, dtype=F64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, values64: np.ndarray) -> None:
        """Store new values, rounding to the storage dtype."""
        self.values = values64.astype(self.values.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.values.shape}, dtype={self.values.dtype})"


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that belongs in a checkpoint."""
        return {}

    def set_buffer(self, name: str, values: np.ndarray) -> None:
        raise KeyError(f"{type(self).__name__} has no buffer {name!r}")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Layer):
    """y = x W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str,
                 dtype=np.float32, bias: bool = True):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"bad dims {in_dim}x{out_dim}")
        self.W = Parameter(f"{name}.W", glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim), dtype)
        self.b = Parameter(f"{name}.b", np.zeros(out_dim), dtype) if bias else None
        self._x: np.ndarray | None = None

    def parameters(self) -> list[Parameter]:
        return [self.W] + ([self.b] if self.b is not None else [])

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=F64)
        if x.shape[1] != self.W.shape[0]:
            raise ValueError(f"{self.W.name}: input width {x.shape[1]} != {self.W.shape[0]}")
        self._x = x
        y = x @ self.W.values.astype(F64)
        if self.b is not None:
            y += self.b.values.astype(F64)
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        gy = np.asarray(gy, dtype=F64)
        self.W.grad += self._x.T @ gy
        if self.b is not None:
            self.b.grad += gy.sum(axis=0)
        return gy @ self.W.values.astype(F64).T


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, gy, 0.0)


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, gy, self.slope * gy)


class Sigmoid(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = sigmoid(x)
        return self._y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy * self._y * (1.0 - self._y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=F64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Dropout(Layer):
    """Inverted dropout; identity when p == 0 or in eval mode."""

    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        if mode != "train" or self.p == 0.0:
            self._mask = None
            return np.asarray(x, dtype=F64)
        keep = 1.0 - self.p
        self._mask = (self.rng.random(x.shape) >= self.p) / keep
        return x * self._mask

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return gy
        return gy * self._mask


class BatchNorm(Layer):
    """Per-feature batch normalization over all nodes in the graph.

    Train mode normalizes with batch statistics (biased variance) and
    updates running stats with the unbiased estimate; eval mode uses the
    running stats.
    """

    def __init__(self, dim: int, name: str, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim), dtype)
        self.beta = Parameter(f"{name}.beta", np.zeros(dim), dtype)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._name = name

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self._name}.running_mean": self.running_mean, f"{self._name}.running_var": self.running_var}

    def set_buffer(self, name: str, values: np.ndarray) -> None:
        if name.endswith("running_mean"):
            self.running_mean = values.astype(self.running_mean.dtype)
        elif name.endswith("running_var"):
            self.running_var = values.astype(self.running_var.dtype)
        else:
            raise KeyError(name)

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        x = np.asarray(x, dtype=F64)
        g = self.gamma.values.astype(F64)
        if mode == "train":
            n = x.shape[0]
            if n < 2:
                raise ValueError("batch norm needs at least 2 rows in train mode")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self._istd = 1.0 / np.sqrt(var + self.eps)
            self._xhat = (x - mean) * self._istd
            unbiased = var * n / (n - 1)
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean.astype(F64) + mom * mean).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1 - mom) * self.running_var.astype(F64) + mom * unbiased).astype(
                self.running_var.dtype
            )
        else:
            istd = 1.0 / np.sqrt(self.running_var.astype(F64) + self.eps)
            self._xhat = (x - self.running_mean.astype(F64)) * istd
            self._istd = istd
        self._train = mode == "train"
        return self._xhat * g + self.beta.values.astype(F64)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        gy = np.asarray(gy, dtype=F64)
        g = self.gamma.values.astype(F64)
        self.gamma.grad += (gy * self._xhat).sum(axis=0)
        self.beta.grad += gy.sum(axis=0)
        gxhat = gy * g
        if not self._train:
            return gxhat * self._istd
        n = gy.shape[0]
        return (self._istd / n) * (n * gxhat - gxhat.sum(axis=0) - self._xhat * (gxhat * self._xhat).sum(axis=0))


def _edge_arrays(graph: CommentGraph) -> dict:
    """Per-edge index arrays for message passing, memoized on the graph.

    dst repeats each row index by its degree (CSR order); perm_src reorders
    edges so they group by source node, valid as a row grouping because the
    adjacency is symmetric, so in-degree equals out-degree everywhere.
    """
    cache = graph._edge_cache
    if "dst" not in cache:
        deg = np.diff(graph.row_offsets)
        if np.any(deg == 0):
            raise ValueError("graph has an isolated node without a self-loop")
        cache["dst"] = np.repeat(np.arange(graph.n_nodes, dtype=np.int64), deg)
        cache["src"] = graph.col_indices
        cache["perm_src"] = np.argsort(graph.col_indices, kind="stable")
        cache["starts"] = graph.row_offsets[:-1]
        cache["w"] = graph.edge_weights.astype(F64)
    return cache


def _segment_softmax(e: np.ndarray, starts: np.ndarray, dst: np.ndarray) -> np.ndarray:
    emax = np.maximum.reduceat(e, starts)
    ex = np.exp(e - emax[dst])
    denom = np.add.reduceat(ex, starts)
    return ex / denom[dst]


class GATLayer(Layer):
    """Multi-head graph attention over a fixed CommentGraph.

    Per head: z = x W; logit over edge (i <- j) is
    LeakyReLU(a_self . z_i + a_neigh . z_j) + beta * w_ij, softmax-normalized
    over each node's neighborhood (self-loop included); the output is the
    attention-weighted sum of neighbor z vectors. Heads are concatenated
    when ``concat`` else averaged. beta starts at zero so training begins
    as a pure GAT and learns how much the similarity weights matter.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, rng: np.random.Generator, name: str,
                 concat: bool = True, slope: float = 0.2, dtype=np.float32):
        if heads < 1:
            raise ValueError("need at least one head")
        self.in_dim, self.out_dim, self.heads, self.concat, self.slope = in_dim, out_dim, heads, concat, slope
        self.W = Parameter(
            f"{name}.W", np.stack([glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim) for _ in range(heads)]),
            dtype,
        )
        self.a_self = Parameter(
            f"{name}.a_self", np.stack([glorot_uniform(rng, (out_dim,), 2 * out_dim, 1) for _ in range(heads)]), dtype
        )
        self.a_neigh = Parameter(
            f"{name}.a_neigh", np.stack([glorot_uniform(rng, (out_dim,), 2 * out_dim, 1) for _ in range(heads)]), dtype
        )
        self.beta = Parameter(f"{name}.beta", np.zeros(heads), dtype)

    def parameters(self) -> list[Parameter]:
        return [self.W, self.a_self, self.a_neigh, self.beta]

    @property
    def width(self) -> int:
        return self.out_dim * self.heads if self.concat else self.out_dim

    def forward(self, x: np.ndarray, graph: CommentGraph) -> np.ndarray:
        x = np.asarray(x, dtype=F64)
        if x.shape[0] != graph.n_nodes:
            raise ValueError(f"feature rows {x.shape[0]} != graph nodes {graph.n_nodes}")
        ea = _edge_arrays(graph)
        dst, src, starts, w = ea["dst"], ea["src"], ea["starts"], ea["w"]
        self._x, self._graph = x, graph
        self._per_head = []
        outs = []
        W64 = self.W.values.astype(F64)
        a_s64 = self.a_self.values.astype(F64)
        a_n64 = self.a_neigh.values.astype(F64)
        b64 = self.beta.values.astype(F64)
        for h in range(self.heads):
            z = x @ W64[h]
            s = (z @ a_s64[h])[dst] + (z @ a_n64[h])[src]
            e = np.where(s > 0, s, self.slope * s) + b64[h] * w
            alpha = _segment_softmax(e, starts, dst)
            out = np.add.reduceat(alpha[:, None] * z[src], starts, axis=0)
            self._per_head.append((z, s, alpha))
            outs.append(out)
        if self.concat:
            return np.concatenate(outs, axis=1)
        return np.mean(outs, axis=0)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        gy = np.asarray(gy, dtype=F64)
        ea = _edge_arrays(self._graph)
        dst, src, starts, w, perm = ea["dst"], ea["src"], ea["starts"], ea["w"], ea["perm_src"]
        x = self._x
        gx = np.zeros_like(x)
        W64 = self.W.values.astype(F64)
        a_s64 = self.a_self.values.astype(F64)
        a_n64 = self.a_neigh.values.astype(F64)
        for h in range(self.heads):
            z, s, alpha = self._per_head[h]
            if self.concat:
                g = gy[:, h * self.out_dim : (h + 1) * self.out_dim]
            else:
                g = gy / self.heads
            g_dst = g[dst]
            # out_i = sum_j alpha_ij z_j
            galpha = np.einsum("ef,ef->e", g_dst, z[src])
            gz = np.add.reduceat((alpha[:, None] * g_dst)[perm], starts, axis=0)
            # softmax over each destination's neighborhood
            row_dot = np.add.reduceat(alpha * galpha, starts)
            ge = alpha * (galpha - row_dot[dst])
            self.beta.grad[h] += float((ge * w).sum())
            gs = np.where(s > 0, ge, self.slope * ge)
            gq = np.add.reduceat(gs, starts)  # by destination node
            gr = np.add.reduceat(gs[perm], starts)  # by source node
            gz += gq[:, None] * a_s64[h] + gr[:, None] * a_n64[h]
            self.a_self.grad[h] += z.T @ gq
            self.a_neigh.grad[h] += z.T @ gr
            self.W.grad[h] += x.T @ gz
            gx += gz @ W64[h].T
        return gx


def bce_loss(y_hat: np.ndarray, y: np.ndarray, eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. y_hat.

    Predictions are clamped to [eps, 1-eps]; the gradient is zero where the
    clamp is active.
    """
    y_hat = np.asarray(y_hat, dtype=F64)
    y = np.asarray(y, dtype=F64)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: y_hat {y_hat.shape} vs y {y.shape}")
    clamped = np.clip(y_hat, eps, 1.0 - eps)
    loss = float(-(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)).mean())
    inside = (y_hat > eps) & (y_hat < 1.0 - eps)
    grad = np.where(inside, (-y / clamped + (1.0 - y) / (1.0 - clamped)) / y.size, 0.0)
    return loss, grad


def adam_step(
    params: list[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 5e-4,
    t: int = 1,
) -> None:
    """One Adam update with bias correction and decoupled weight decay."""
    if t < 1:
        raise ValueError("step counter t starts at 1")
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter {p.name!r}")
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        v64 = p.values.astype(F64)
        v64 -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            v64 -= lr * weight_decay * p.values.astype(F64)
        p.assign(v64)
