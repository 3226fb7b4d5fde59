"""Full-graph training with early stopping, plus the metric suite.

Each epoch runs one forward over the entire training graph, a BCE backward,
and one Adam step, then scores the validation graph. The checkpoint with
the best validation AUC is kept; training stops after `patience` epochs
without strict improvement or at `max_epochs`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from civigraph.fileio import atomic_write_text
from civigraph.graph_builder import CommentGraph
from civigraph.hybrid_model import HybridModel
from civigraph.nn_core import adam_step, bce_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 50
    lr: float = 1e-3
    weight_decay: float = 5e-4
    threshold: float = 0.5
    seed: int = 0
    log_every: int = 0  # epochs between progress lines; 0 disables

    def __post_init__(self):
        if not 0 < self.patience < self.max_epochs:
            raise ValueError(f"need 0 < patience < max_epochs, got {self.patience}/{self.max_epochs}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_auc: float
    val_auc: float
    mean_alpha_gnn: float


@dataclass
class EvalReport:
    auc: float
    f1: float
    precision: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    mean_alpha_gnn: float
    mean_alpha_mlp: float
    train_test_auc_gap: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_counts(y_hat: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with predictions at or above the threshold positive."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {y_hat.shape} vs {y.shape}")
    pred = y_hat >= threshold
    actual = y == 1
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    tn = int(np.sum(~pred & ~actual))
    fn = int(np.sum(~pred & actual))
    return tp, fp, tn, fn


def precision_recall_f1_accuracy(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float, float]:
    """Standard formulas; a metric is 0 when its denominator is 0."""
    if min(tp, fp, tn, fn) < 0:
        raise ValueError("negative counts")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    return precision, recall, f1, accuracy


def auc_roc(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Rank-based AUC (Mann-Whitney), ties given average ranks."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {y_hat.shape} vs {y.shape}")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")

    order = np.argsort(y_hat, kind="mergesort")
    sorted_scores = y_hat[order]
    ranks = np.empty(y.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.concatenate([[True], sorted_scores[1:] != sorted_scores[:-1], [True]]))
    for a, b in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)  # average of 1-based ranks a+1..b
    rank_sum_pos = float(ranks[np.asarray(y) == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class TrainResult:
    model: HybridModel
    history: list[EpochStats]
    best_epoch: int
    best_val_auc: float


def train(
    model: HybridModel,
    graphs: dict[str, CommentGraph],
    features: dict[str, np.ndarray],
    labels: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> TrainResult:
    """Train `model` on the 'train' partition, early-stop on 'val' AUC.

    The model is restored to the best-validation checkpoint before being
    returned. History AUC on the training partition is computed from the
    same (train-mode) forward that produced the loss.
    """
    for part in ("train", "val"):
        if graphs[part].n_nodes != features[part].shape[0] or graphs[part].n_nodes != labels[part].shape[0]:
            raise ValueError(
                f"{part}: graph has {graphs[part].n_nodes} nodes, features {features[part].shape[0]}, "
                f"labels {labels[part].shape[0]}"
            )

    y_train = np.asarray(labels["train"], dtype=np.float64)
    y_val = np.asarray(labels["val"])
    history: list[EpochStats] = []
    best_state = model.state_snapshot()
    best_val = -np.inf
    best_epoch = 0
    epochs_without_improvement = 0

    for epoch in range(1, cfg.max_epochs + 1):
        model.zero_grad()
        y_hat, fusion = model.forward(features["train"], graphs["train"], mode="train")
        loss, grad = bce_loss(y_hat, y_train)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}")
        model.backward(grad)
        adam_step(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, t=epoch)

        val_hat, _ = model.forward(features["val"], graphs["val"], mode="eval")
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss,
            train_auc=auc_roc(y_hat, y_train.astype(np.int64)),
            val_auc=auc_roc(val_hat, y_val),
            mean_alpha_gnn=float(fusion.alpha_gnn.mean()),
        )
        history.append(stats)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d loss %.4f train_auc %.4f val_auc %.4f", epoch, loss, stats.train_auc, stats.val_auc)

        if stats.val_auc > best_val:
            best_val = stats.val_auc
            best_epoch = epoch
            best_state = model.state_snapshot()
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                break

    model.load_state(best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_auc=float(best_val))


def evaluate(
    model: HybridModel,
    graph: CommentGraph,
    features: np.ndarray,
    y: np.ndarray,
    threshold: float = 0.5,
    train_report: EvalReport | None = None,
) -> EvalReport:
    """One eval-mode forward over a partition graph, all metrics, mean
    fusion weights; the train-test AUC gap when a train report is given."""
    y_hat, fusion = model.forward(features, graph, mode="eval")
    tp, fp, tn, fn = confusion_counts(y_hat, y, threshold)
    precision, recall, f1, accuracy = precision_recall_f1_accuracy(tp, fp, tn, fn)
    auc = auc_roc(y_hat, y)
    return EvalReport(
        auc=auc,
        f1=f1,
        precision=precision,
        recall=recall,
        accuracy=accuracy,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        mean_alpha_gnn=float(fusion.alpha_gnn.mean()),
        mean_alpha_mlp=float(fusion.alpha_mlp.mean()),
        train_test_auc_gap=(train_report.auc - auc) if train_report is not None else None,
    )


def predict(model: HybridModel, graph: CommentGraph, features: np.ndarray):
    """Eval-mode probabilities and fusion weights for one partition."""
    return model.forward(features, graph, mode="eval")


# ---- report writers --------------------------------------------------------


def write_history(history: list[EpochStats], path: str | Path) -> None:
    rows = ["epoch,train_loss,train_auc,val_auc,mean_alpha_gnn"]
    for s in history:
        rows.append(f"{s.epoch},{s.train_loss:.10g},{s.train_auc:.10g},{s.val_auc:.10g},{s.mean_alpha_gnn:.10g}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_history(path: str | Path) -> list[EpochStats]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EpochStats(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    train_auc=float(row["train_auc"]),
                    val_auc=float(row["val_auc"]),
                    mean_alpha_gnn=float(row["mean_alpha_gnn"]),
                )
            )
    return out


def write_report(report: EvalReport, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_predictions(node_ids: np.ndarray, y: np.ndarray, y_hat: np.ndarray, path: str | Path) -> None:
    lines = ["node_id\ty\ty_hat"]
    for nid, yi, pi in zip(node_ids, y, y_hat):
        lines.append(f"{int(nid)}\t{int(yi)}\t{pi:.10g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_attention_report(
    node_ids: np.ndarray,
    alpha_gnn: np.ndarray,
    alpha_mlp: np.ndarray,
    y_hat: np.ndarray,
    y: np.ndarray,
    path: str | Path,
) -> None:
    lines = ["node_id\talpha_gnn\talpha_mlp\ty_hat\ty"]
    for nid, ag, am, pi, yi in zip(node_ids, alpha_gnn, alpha_mlp, y_hat, y):
        lines.append(f"{int(nid)}\t{ag:.10g}\t{am:.10g}\t{pi:.10g}\t{int(yi)}")
    atomic_write_text(path, "\n".join(lines) + "\n")
