"""The hybrid two-branch architecture: a stack of GAT layers over the
comment graph, a structure-free MLP over the same features, a per-node
attention network that produces a convex combination of the two branch
outputs, and a small classifier head ending in a sigmoid.

Checkpoint format MDL1: magic | u32 config-JSON length | config JSON |
u32 entry count | entries of (u16 name length, name, u8 ndim, ndim x u32
dims, float32 payload), covering every parameter and batch-norm running
stat, all little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from civigraph.fileio import atomic_write_bytes
from civigraph.graph_builder import CommentGraph
from civigraph.nn_core import (
    F64,
    BatchNorm,
    Dropout,
    GATLayer,
    Layer,
    Linear,
    Parameter,
    ReLU,
    sigmoid,
)
from civigraph.rng import STREAM_DROPOUT, STREAM_MODEL_INIT, derive_rng

MODEL_MAGIC = b"MDL1"


@dataclass
class ModelConfig:
    input_dim: int = 768
    hidden_dim: int = 256
    gnn_layers: int = 3
    heads: int = 3
    mlp_branch_layers: int = 2
    classifier_dims: tuple[int, ...] = (256, 128, 1)
    dropout_p: float = 0.3
    task: str = "toxicity"
    attention_hidden: int = 128
    negative_slope: float = 0.2
    bn_momentum: float = 0.1
    use_batch_norm: bool = True
    bn_after_final: bool = True
    use_residual: bool = True
    param_dtype: str = "float32"

    def __post_init__(self):
        self.classifier_dims = tuple(self.classifier_dims)
        if self.gnn_layers < 1:
            raise ValueError("need at least one GAT layer")
        if self.mlp_branch_layers < 1:
            raise ValueError("need at least one MLP layer")
        if self.classifier_dims[-1] != 1:
            raise ValueError("classifier must end in width 1")
        if self.classifier_dims[0] != self.hidden_dim:
            raise ValueError("classifier input width must equal hidden_dim")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.param_dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported param_dtype {self.param_dtype!r}")

    @property
    def dtype(self):
        return np.float32 if self.param_dtype == "float32" else np.float64

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class FusionOutput:
    h_fused: np.ndarray
    alpha_gnn: np.ndarray
    alpha_mlp: np.ndarray


class _GnnBlock:
    """One GAT layer with optional batch norm, residual shortcut, ReLU."""

    def __init__(self, gat: GATLayer, bn: BatchNorm | None, proj: Linear | None, identity_residual: bool):
        self.gat = gat
        self.bn = bn
        self.proj = proj
        self.identity_residual = identity_residual
        self.act = ReLU()

    def layers(self) -> list[Layer]:
        out: list[Layer] = [self.gat]
        if self.bn is not None:
            out.append(self.bn)
        if self.proj is not None:
            out.append(self.proj)
        return out

    def forward(self, h: np.ndarray, graph: CommentGraph, mode: str) -> np.ndarray:
        y = self.gat.forward(h, graph)
        if self.bn is not None:
            y = self.bn.forward(y, mode)
        if self.identity_residual:
            y = y + h
        elif self.proj is not None:
            y = y + self.proj.forward(h)
        return self.act.forward(y)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        gy = self.act.backward(gy)
        gh = np.zeros(0)
        if self.identity_residual:
            gh = gy.copy()
        elif self.proj is not None:
            gh = self.proj.backward(gy)
        if self.bn is not None:
            gy = self.bn.backward(gy)
        gx = self.gat.backward(gy)
        if gh.size:
            gx = gx + gh
        return gx


class HybridModel:
    """Both branches, the fusion attention network, and the classifier.

    ``alpha_override`` replaces the learned per-node fusion weights with a
    fixed (alpha_gnn, alpha_mlp) pair; used to probe branch contributions.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = derive_rng(seed, STREAM_MODEL_INIT)
        self.dropout_rng = derive_rng(seed, STREAM_DROPOUT)
        dt = config.dtype
        c = config

        self.gnn_blocks: list[_GnnBlock] = []
        in_dim = c.input_dim
        for layer in range(c.gnn_layers):
            final = layer == c.gnn_layers - 1
            heads = 1 if final else c.heads
            width = c.hidden_dim * heads
            gat = GATLayer(in_dim, c.hidden_dim, heads, rng, f"gnn.{layer}.gat",
                           concat=True, slope=c.negative_slope, dtype=dt)
            use_bn = c.use_batch_norm and (c.bn_after_final or not final)
            bn = BatchNorm(width, f"gnn.{layer}.bn", momentum=c.bn_momentum, dtype=dt) if use_bn else None
            identity = c.use_residual and in_dim == width
            proj = None
            if c.use_residual and not identity:
                proj = Linear(in_dim, width, rng, f"gnn.{layer}.proj", dtype=dt, bias=False)
            self.gnn_blocks.append(_GnnBlock(gat, bn, proj, identity))
            in_dim = width

        self.mlp_layers: list[Linear] = []
        self.mlp_acts: list[ReLU] = []
        self.mlp_drops: list[Dropout] = []
        dims = [c.input_dim] + [c.hidden_dim] * c.mlp_branch_layers
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.mlp_layers.append(Linear(a, b, rng, f"mlp.{i}", dtype=dt))
            if i < c.mlp_branch_layers - 1:
                self.mlp_acts.append(ReLU())
                self.mlp_drops.append(Dropout(c.dropout_p, self.dropout_rng))

        self.att1 = Linear(2 * c.hidden_dim, c.attention_hidden, rng, "att.0", dtype=dt)
        self.att_act = ReLU()
        self.att2 = Linear(c.attention_hidden, 2, rng, "att.1", dtype=dt)

        self.clf_layers: list[Linear] = []
        self.clf_acts: list[ReLU] = []
        self.clf_drops: list[Dropout] = []
        for i, (a, b) in enumerate(zip(c.classifier_dims[:-1], c.classifier_dims[1:])):
            self.clf_layers.append(Linear(a, b, rng, f"clf.{i}", dtype=dt))
            if i < len(c.classifier_dims) - 2:
                self.clf_acts.append(ReLU())
                self.clf_drops.append(Dropout(c.dropout_p, self.dropout_rng))

        self.alpha_override: tuple[float, float] | None = None

    # ---- parameter bookkeeping -------------------------------------------

    def _all_layers(self) -> list[Layer]:
        layers: list[Layer] = []
        for blk in self.gnn_blocks:
            layers.extend(blk.layers())
        layers.extend(self.mlp_layers)
        layers.extend([self.att1, self.att2])
        layers.extend(self.clf_layers)
        return layers

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self._all_layers():
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self._all_layers():
            out.update(layer.buffers())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_snapshot(self) -> dict[str, np.ndarray]:
        state = {name: p.values.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffer_owners = {name: layer for layer in self._all_layers() for name in layer.buffers()}
        for name, values in state.items():
            if name in params:
                p = params[name]
                if tuple(values.shape) != p.shape:
                    raise ValueError(f"{name}: shape {values.shape} != expected {p.shape}")
                p.values = np.asarray(values, dtype=p.values.dtype).copy()
            elif name in buffer_owners:
                buffer_owners[name].set_buffer(name, np.asarray(values))
            else:
                raise KeyError(f"unknown state entry {name!r}")

    # ---- forward / backward ----------------------------------------------

    def gnn_branch(self, x: np.ndarray, graph: CommentGraph, mode: str) -> np.ndarray:
        h = np.asarray(x, dtype=F64)
        for blk in self.gnn_blocks:
            h = blk.forward(h, graph, mode)
        return h

    def mlp_branch(self, x: np.ndarray, mode: str) -> np.ndarray:
        h = np.asarray(x, dtype=F64)
        for i, lin in enumerate(self.mlp_layers):
            h = lin.forward(h)
            if i < len(self.mlp_acts):
                h = self.mlp_acts[i].forward(h)
                h = self.mlp_drops[i].forward(h, mode)
        return h

    def fuse(self, h_gnn: np.ndarray, h_mlp: np.ndarray) -> FusionOutput:
        if h_gnn.shape != h_mlp.shape:
            raise ValueError(f"branch shapes differ: {h_gnn.shape} vs {h_mlp.shape}")
        self._h_gnn, self._h_mlp = h_gnn, h_mlp
        if self.alpha_override is not None:
            a0, a1 = self.alpha_override
            alpha = np.full((h_gnn.shape[0], 2), 0.0, dtype=F64)
            alpha[:, 0] = a0
            alpha[:, 1] = a1
        else:
            concat = np.concatenate([h_gnn, h_mlp], axis=1)
            logits = self.att2.forward(self.att_act.forward(self.att1.forward(concat)))
            shifted = logits - logits.max(axis=1, keepdims=True)
            ex = np.exp(shifted)
            alpha = ex / ex.sum(axis=1, keepdims=True)
        self._alpha = alpha
        h_fused = alpha[:, :1] * h_gnn + alpha[:, 1:] * h_mlp
        return FusionOutput(h_fused=h_fused, alpha_gnn=alpha[:, 0], alpha_mlp=alpha[:, 1])

    def classify(self, h_fused: np.ndarray, mode: str) -> np.ndarray:
        h = h_fused
        for i, lin in enumerate(self.clf_layers):
            h = lin.forward(h)
            if i < len(self.clf_acts):
                h = self.clf_acts[i].forward(h)
                h = self.clf_drops[i].forward(h, mode)
        self._logits = h[:, 0]
        self._y_hat = sigmoid(self._logits)
        return self._y_hat

    def forward(self, x: np.ndarray, graph: CommentGraph, mode: str = "eval") -> tuple[np.ndarray, FusionOutput]:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h_gnn = self.gnn_branch(x, graph, mode)
        h_mlp = self.mlp_branch(x, mode)
        fusion = self.fuse(h_gnn, h_mlp)
        y_hat = self.classify(fusion.h_fused, mode)
        return y_hat, fusion

    def backward(self, g_y_hat: np.ndarray) -> np.ndarray:
        """Accumulate gradients for the most recent forward; returns dL/dx."""
        g = np.asarray(g_y_hat, dtype=F64) * self._y_hat * (1.0 - self._y_hat)
        g = g[:, None]
        for i in range(len(self.clf_layers) - 1, -1, -1):
            if i < len(self.clf_acts):
                g = self.clf_drops[i].backward(g)
                g = self.clf_acts[i].backward(g)
            g = self.clf_layers[i].backward(g)
        g_fused = g

        alpha = self._alpha
        h_gnn, h_mlp = self._h_gnn, self._h_mlp
        g_gnn = alpha[:, :1] * g_fused
        g_mlp = alpha[:, 1:] * g_fused
        if self.alpha_override is None:
            galpha = np.stack(
                [(g_fused * h_gnn).sum(axis=1), (g_fused * h_mlp).sum(axis=1)], axis=1
            )
            glogits = alpha * (galpha - (alpha * galpha).sum(axis=1, keepdims=True))
            gconcat = self.att1.backward(self.att_act.backward(self.att2.backward(glogits)))
            half = h_gnn.shape[1]
            g_gnn = g_gnn + gconcat[:, :half]
            g_mlp = g_mlp + gconcat[:, half:]

        g = g_mlp
        for i in range(len(self.mlp_layers) - 1, -1, -1):
            if i < len(self.mlp_acts):
                g = self.mlp_drops[i].backward(g)
                g = self.mlp_acts[i].backward(g)
            g = self.mlp_layers[i].backward(g)
        gx = g

        g = g_gnn
        for blk in reversed(self.gnn_blocks):
            g = blk.backward(g)
        return gx + g


def save_checkpoint(model: HybridModel, path: str | Path) -> None:
    config_json = model.config.to_json().encode("utf-8")
    entries = model.state_snapshot()
    chunks = [MODEL_MAGIC, struct.pack("<I", len(config_json)), config_json, struct.pack("<I", len(entries))]
    for name, values in entries.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(values, dtype="<f4")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path: str | Path) -> HybridModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    (cfg_len,) = struct.unpack_from("<I", data, 4)
    config = ModelConfig.from_json(data[8 : 8 + cfg_len].decode("utf-8"))
    off = 8 + cfg_len
    (n_entries,) = struct.unpack_from("<I", data, off)
    off += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = values.copy()
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    model = HybridModel(config, seed=0)
    model.load_state(state)
    return model
