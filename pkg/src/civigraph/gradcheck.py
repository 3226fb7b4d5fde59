"""Central finite-difference verification of every differentiable op.

The harness perturbs parameter (and input) coordinates one at a time on
float64 storage, re-evaluates a scalar loss, and compares the quotient
against the analytic gradient accumulated by the layer backwards. Used by
``civigraph gradcheck`` and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from civigraph.graph_builder import CommentGraph, finalize_graph
from civigraph.hybrid_model import HybridModel, ModelConfig
from civigraph.nn_core import (
    BatchNorm,
    GATLayer,
    LeakyReLU,
    Linear,
    Parameter,
    ReLU,
    Sigmoid,
    bce_loss,
)
from civigraph.rng import STREAM_GRADCHECK, derive_rng

STEP = 1e-4
TOLERANCE = 1e-4
# Coordinates whose analytic and numeric gradients are both below this are
# treated as matching zeros rather than fed into a relative quotient.
ZERO_FLOOR = 1e-6


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < ZERO_FLOOR:
        return 0.0
    return abs(analytic - numeric) / scale


def check_parameter(
    p: Parameter,
    analytic_grad: np.ndarray,
    loss_fn: Callable[[], float],
    rng: np.random.Generator,
    max_coords: int = 24,
    step: float = STEP,
) -> float:
    """Max relative error between analytic grad and central differences over
    a sample of coordinates of `p` (all coordinates when small)."""
    flat = p.values.reshape(-1)
    size = flat.size
    coords = np.arange(size) if size <= max_coords else rng.choice(size, size=max_coords, replace=False)
    worst = 0.0
    for c in coords:
        original = flat[c]
        flat[c] = original + step
        plus = loss_fn()
        flat[c] = original - step
        minus = loss_fn()
        flat[c] = original
        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(float(analytic_grad.reshape(-1)[c]), numeric))
    return worst


def _run_case(
    name: str,
    params: list[Parameter],
    loss_fn: Callable[[], float],
    grad_fn: Callable[[], dict[str, np.ndarray]],
    rng: np.random.Generator,
    max_coords: int = 24,
) -> CheckResult:
    grads = grad_fn()
    worst = 0.0
    checked = 0
    for p in params:
        worst = max(worst, check_parameter(p, grads[p.name], loss_fn, rng, max_coords))
        checked += min(p.values.size, max_coords)
    return CheckResult(op=name, max_rel_error=worst, coords_checked=checked)


def _random_graph(rng: np.random.Generator, n: int, n_edges: int) -> CommentGraph:
    ii = rng.integers(0, n, size=n_edges)
    jj = rng.integers(0, n, size=n_edges)
    keep = ii != jj
    ww = rng.uniform(0.3, 1.0, size=int(keep.sum()))
    return finalize_graph((ii[keep], jj[keep], ww), n)


def _as_input_param(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 1.0) -> Parameter:
    return Parameter("x", rng.standard_normal(shape) * scale, dtype=np.float64)


def _quadratic_target(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.standard_normal(shape)


def check_linear(seed: int = 0) -> CheckResult:
    rng = derive_rng(seed, STREAM_GRADCHECK, 1)
    lin = Linear(5, 4, rng, "lin", dtype=np.float64)
    x = _as_input_param(rng, (3, 5))
    t = _quadratic_target(rng, (3, 4))

    def loss() -> float:
        y = lin.forward(x.values)
        return float(0.5 * ((y - t) ** 2).sum())

    def grads() -> dict[str, np.ndarray]:
        lin.zero_grad()
        y = lin.forward(x.values)
        gx = lin.backward(y - t)
        return {"lin.W": lin.W.grad, "lin.b": lin.b.grad, "x": gx}

    return _run_case("linear", [lin.W, lin.b, x], loss, grads, rng)


def _activation_case(name: str, layer, seed: int) -> CheckResult:
    rng = derive_rng(seed, STREAM_GRADCHECK, 2)
    x = _as_input_param(rng, (4, 6))
    # keep entries away from the kink at zero
    x.values[np.abs(x.values) < 0.05] += 0.2
    t = _quadratic_target(rng, (4, 6))

    def loss() -> float:
        y = layer.forward(x.values)
        return float(0.5 * ((y - t) ** 2).sum())

    def grads() -> dict[str, np.ndarray]:
        y = layer.forward(x.values)
        return {"x": layer.backward(y - t)}

    return _run_case(name, [x], loss, grads, rng)


def check_relu(seed: int = 0) -> CheckResult:
    return _activation_case("relu", ReLU(), seed)


def check_leaky_relu(seed: int = 0) -> CheckResult:
    return _activation_case("leaky_relu", LeakyReLU(0.2), seed)


def check_sigmoid(seed: int = 0) -> CheckResult:
    return _activation_case("sigmoid", Sigmoid(), seed)


def check_bce(seed: int = 0) -> CheckResult:
    rng = derive_rng(seed, STREAM_GRADCHECK, 3)
    x = Parameter("x", rng.uniform(0.05, 0.95, size=12), dtype=np.float64)
    y = (rng.random(12) < 0.5).astype(np.float64)

    def loss() -> float:
        return bce_loss(x.values, y)[0]

    def grads() -> dict[str, np.ndarray]:
        return {"x": bce_loss(x.values, y)[1]}

    return _run_case("bce_loss", [x], loss, grads, rng)


def check_batch_norm(seed: int = 0) -> CheckResult:
    # Train-mode loss is independent of the running stats, so their drift
    # across repeated evaluations does not disturb the finite differences.
    rng = derive_rng(seed, STREAM_GRADCHECK, 4)
    x = _as_input_param(rng, (6, 5))
    t = _quadratic_target(rng, (6, 5))
    bn = BatchNorm(5, "bn", dtype=np.float64)
    bn.gamma.values = rng.uniform(0.5, 1.5, size=5)
    bn.beta.values = rng.standard_normal(5)

    def loss() -> float:
        y = bn.forward(x.values, "train")
        return float(0.5 * ((y - t) ** 2).sum())

    def grads() -> dict[str, np.ndarray]:
        bn.zero_grad()
        y = bn.forward(x.values, "train")
        gx = bn.backward(y - t)
        return {"bn.gamma": bn.gamma.grad, "bn.beta": bn.beta.grad, "x": gx}

    return _run_case("batch_norm", [bn.gamma, bn.beta, x], loss, grads, rng)


def check_gat(seed: int = 0) -> CheckResult:
    rng = derive_rng(seed, STREAM_GRADCHECK, 5)
    graph = _random_graph(rng, n=5, n_edges=8)
    gat = GATLayer(4, 3, heads=2, rng=rng, name="gat", concat=True, dtype=np.float64)
    gat.beta.values = rng.uniform(-0.5, 0.5, size=2)  # non-zero so the w path is exercised
    x = _as_input_param(rng, (5, 4))
    t = _quadratic_target(rng, (5, 6))

    def loss() -> float:
        y = gat.forward(x.values, graph)
        return float(0.5 * ((y - t) ** 2).sum())

    def grads() -> dict[str, np.ndarray]:
        gat.zero_grad()
        y = gat.forward(x.values, graph)
        gx = gat.backward(y - t)
        return {p.name: p.grad for p in gat.parameters()} | {"x": gx}

    return _run_case("gat_layer", gat.parameters() + [x], loss, grads, rng)


def check_hybrid_model(seed: int = 0) -> CheckResult:
    """End-to-end check through both branches, fusion, classifier and BCE."""
    rng = derive_rng(seed, STREAM_GRADCHECK, 6)
    config = ModelConfig(
        input_dim=12,
        hidden_dim=6,
        gnn_layers=2,
        heads=2,
        classifier_dims=(6, 4, 1),
        dropout_p=0.0,
        attention_hidden=5,
        param_dtype="float64",
    )
    model = HybridModel(config, seed=seed)
    graph = _random_graph(rng, n=7, n_edges=12)
    x = Parameter("x", rng.standard_normal((7, 12)), dtype=np.float64)
    y = (rng.random(7) < 0.5).astype(np.float64)

    def loss() -> float:
        y_hat, _ = model.forward(x.values, graph, mode="train")
        return bce_loss(y_hat, y)[0]

    def grads() -> dict[str, np.ndarray]:
        model.zero_grad()
        y_hat, _ = model.forward(x.values, graph, mode="train")
        gx = model.backward(bce_loss(y_hat, y)[1])
        return {p.name: p.grad for p in model.parameters()} | {"x": gx}

    return _run_case("hybrid_model", model.parameters() + [x], loss, grads, rng, max_coords=8)


ALL_CHECKS: dict[str, Callable[[int], CheckResult]] = {
    "linear": check_linear,
    "relu": check_relu,
    "leaky_relu": check_leaky_relu,
    "sigmoid": check_sigmoid,
    "bce_loss": check_bce,
    "batch_norm": check_batch_norm,
    "gat_layer": check_gat,
    "hybrid_model": check_hybrid_model,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed) for fn in ALL_CHECKS.values()]
