"""Command-line pipeline: ingest -> build-graph -> train -> eval/predict,
plus a gradcheck verification harness.

Option precedence is command-line flag > JSON config file (--config) >
built-in default. All output files are written atomically; reruns with
identical inputs and seed produce byte-identical outputs.

Exit codes: 0 success, 1 failed verification (gradcheck), 2 input or
usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from civigraph import gradcheck as gradcheck_mod
from civigraph.data_pipeline import (
    Split,
    Task,
    aggregate_labels,
    balance_dataset,
    l2_normalize,
    load_embeddings,
    parse_corpus,
    read_splits,
    select_rows,
    split_dataset,
    write_splits,
)
from civigraph.fileio import atomic_write_text
from civigraph.graph_builder import GraphConfig, build_graph, graph_stats, load_graph, save_graph
from civigraph.hybrid_model import HybridModel, ModelConfig, load_checkpoint, save_checkpoint
from civigraph.trainer_eval import (
    TrainConfig,
    evaluate,
    predict,
    train,
    write_attention_report,
    write_history,
    write_predictions,
    write_report,
)

log = logging.getLogger("civigraph")

DEFAULTS: dict = {
    "task": "toxicity",
    "seed": 0,
    "ratios": "8,1,1",
    "tau": 0.9,
    "k_min": 5,
    "block_size": 1024,
    "threads": 1,
    "hidden_dim": 256,
    "gnn_layers": 3,
    "heads": 3,
    "attention_hidden": 128,
    "dropout_p": 0.3,
    "lr": 1e-3,
    "weight_decay": 5e-4,
    "max_epochs": 500,
    "patience": 50,
    "threshold": 0.5,
    "split": "test",
    "train_gap": False,
    "log_every": 25,
}


def _opt(parser: argparse.ArgumentParser, flag: str, key: str, type_=str, help_: str = "", **kw) -> None:
    parser.add_argument(flag, dest=key, type=type_, default=None, help=f"{help_} (default: {DEFAULTS[key]})", **kw)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config file; flags override its values")
    parser.add_argument("--out-dir", dest="out_dir", default=None, help="output directory (default: .)")
    _opt(parser, "--task", "task", str, "task label set", choices=[t.value for t in Task])
    _opt(parser, "--seed", "seed", int, "global random seed")
    _opt(parser, "--tau", "tau", float, "similarity threshold for graph edges")
    _opt(parser, "--k-min", "k_min", int, "minimum neighbors per node")
    _opt(parser, "--threads", "threads", int, "worker threads for graph building")


def resolve(args: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            file_opts = json.load(fh)
        unknown = set(file_opts) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        opts.update(file_opts)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            opts[key] = value
    opts["ratios"] = tuple(int(r) for r in str(opts["ratios"]).split(","))
    if len(opts["ratios"]) != 3:
        raise ValueError(f"ratios must have three parts, got {opts['ratios']}")
    return opts


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args: argparse.Namespace, *names: str) -> list[Path]:
    paths = []
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            raise ValueError(f"missing required --{name.replace('_', '-')}")
        path = Path(value)
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        paths.append(path)
    return paths


def cmd_ingest(args: argparse.Namespace) -> int:
    opts = resolve(args)
    comments_path, annotations_path = _require(args, "comments", "annotations")
    out = _out_dir(args)
    task = Task(opts["task"])

    comments, annotations = parse_corpus(comments_path, annotations_path)
    labels = aggregate_labels(annotations)
    known = {c.comment_id for c in comments}
    dropped = sorted(cid for cid in known if cid not in labels)
    if dropped:
        log.warning("%d comments have no annotations and were dropped", len(dropped))
    labels = {cid: y for cid, y in labels.items() if cid in known}
    if not labels:
        raise ValueError("no comment has both text and annotations")

    positives = sum(labels.values())
    balanced = balance_dataset(labels, seed=opts["seed"])
    dataset = split_dataset(balanced, labels, ratios=opts["ratios"], seed=opts["seed"], task=task)
    write_splits(dataset, out / f"{task.value}_splits.tsv")

    split_sizes = {s.value: len(dataset.ids_for(s)) for s in Split}
    stats = {
        "task": task.value,
        "seed": opts["seed"],
        "ratios": list(opts["ratios"]),
        "n_comments": len(comments),
        "n_annotations": sum(len(a.worker_votes) for a in annotations),
        "n_labeled": len(labels),
        "n_dropped_no_annotations": len(dropped),
        "positive_count": positives,
        "positive_rate": positives / len(labels),
        "balanced_size": len(balanced),
        "split_sizes": split_sizes,
    }
    atomic_write_text(out / f"{task.value}_ingest_stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(
        f"{task.value}: {len(comments)} comments, {stats['n_annotations']} annotations, "
        f"{100 * stats['positive_rate']:.1f}% positive before balancing; "
        f"balanced to {len(balanced)}; splits {split_sizes}"
    )
    return 0


def cmd_build_graph(args: argparse.Namespace) -> int:
    opts = resolve(args)
    emb_path, splits_path = _require(args, "embeddings", "splits")
    out = _out_dir(args)
    cfg = GraphConfig(tau=opts["tau"], k_min=opts["k_min"], block_size=opts["block_size"])

    emb = l2_normalize(load_embeddings(emb_path))
    dataset = read_splits(splits_path, task=Task(opts["task"]))
    for split in Split:
        ids = dataset.ids_for(split)
        if not ids:
            continue
        part = select_rows(emb, ids)
        graph = build_graph(part, cfg, threads=opts["threads"])
        save_graph(graph, out / f"graph_{split.value}.grf1")
        stats = graph_stats(graph, cfg.tau)
        atomic_write_text(
            out / f"graph_{split.value}_stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n"
        )
        print(
            f"{split.value}: {stats['n_nodes']} nodes, {stats['edges_undirected']} edges "
            f"({stats['fallback_edges']} fallback), min degree {stats['min_degree']}, "
            f"{stats['connected_components']} components"
        )
    return 0


def _load_partition(emb, dataset, graph_dir: Path, split: Split):
    graph = load_graph(graph_dir / f"graph_{split.value}.grf1")
    labels_by_id = {e.comment_id: e.label for e in dataset.entries if e.split == split}
    missing = [int(nid) for nid in graph.node_ids if int(nid) not in labels_by_id]
    if missing or graph.n_nodes != len(labels_by_id):
        raise ValueError(
            f"{split.value} graph has {graph.n_nodes} nodes but splits file lists "
            f"{len(labels_by_id)} {split.value} ids ({len(missing)} unknown)"
        )
    x = select_rows(emb, graph.node_ids).values
    y = np.array([labels_by_id[int(nid)] for nid in graph.node_ids], dtype=np.int64)
    return graph, x, y


def cmd_train(args: argparse.Namespace) -> int:
    opts = resolve(args)
    emb_path, splits_path, graph_dir = _require(args, "embeddings", "splits", "graph_dir")
    out = _out_dir(args)

    emb = l2_normalize(load_embeddings(emb_path))
    dataset = read_splits(splits_path, task=Task(opts["task"]))
    graphs, features, labels = {}, {}, {}
    for split in (Split.TRAIN, Split.VAL):
        graphs[split.value], features[split.value], labels[split.value] = _load_partition(
            emb, dataset, graph_dir, split
        )

    model_cfg = ModelConfig(
        input_dim=emb.dim,
        hidden_dim=opts["hidden_dim"],
        gnn_layers=opts["gnn_layers"],
        heads=opts["heads"],
        classifier_dims=(opts["hidden_dim"], opts["hidden_dim"] // 2, 1),
        dropout_p=opts["dropout_p"],
        task=opts["task"],
        attention_hidden=opts["attention_hidden"],
    )
    train_cfg = TrainConfig(
        max_epochs=opts["max_epochs"],
        patience=opts["patience"],
        lr=opts["lr"],
        weight_decay=opts["weight_decay"],
        threshold=opts["threshold"],
        seed=opts["seed"],
        log_every=opts["log_every"],
    )
    model = HybridModel(model_cfg, seed=opts["seed"])
    result = train(model, graphs, features, labels, train_cfg)
    save_checkpoint(result.model, out / "checkpoint.mdl1")
    write_history(result.history, out / "history.csv")
    print(
        f"trained {len(result.history)} epochs; best val AUC {result.best_val_auc:.4f} "
        f"at epoch {result.best_epoch}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    opts = resolve(args)
    ckpt_path, emb_path, splits_path, graph_dir = _require(args, "checkpoint", "embeddings", "splits", "graph_dir")
    out = _out_dir(args)
    split = Split(opts["split"])

    model = load_checkpoint(ckpt_path)
    emb = l2_normalize(load_embeddings(emb_path))
    dataset = read_splits(splits_path, task=Task(opts["task"]))
    graph, x, y = _load_partition(emb, dataset, graph_dir, split)

    train_report = None
    if opts["train_gap"]:
        tr_graph, tr_x, tr_y = _load_partition(emb, dataset, graph_dir, Split.TRAIN)
        train_report = evaluate(model, tr_graph, tr_x, tr_y, threshold=opts["threshold"])
    report = evaluate(model, graph, x, y, threshold=opts["threshold"], train_report=train_report)
    write_report(report, out / f"report_{split.value}.json")

    y_hat, fusion = predict(model, graph, x)
    write_predictions(graph.node_ids, y, y_hat, out / f"predictions_{split.value}.tsv")
    write_attention_report(
        graph.node_ids, fusion.alpha_gnn, fusion.alpha_mlp, y_hat, y, out / f"attention_{split.value}.tsv"
    )
    gap = f", train-test AUC gap {report.train_test_auc_gap:.4f}" if report.train_test_auc_gap is not None else ""
    print(
        f"{split.value}: AUC {report.auc:.4f} F1 {report.f1:.4f} P {report.precision:.4f} "
        f"R {report.recall:.4f} acc {report.accuracy:.4f}{gap}"
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    opts = resolve(args)
    ckpt_path, emb_path, splits_path, graph_dir = _require(args, "checkpoint", "embeddings", "splits", "graph_dir")
    out = _out_dir(args)
    split = Split(opts["split"])

    model = load_checkpoint(ckpt_path)
    emb = l2_normalize(load_embeddings(emb_path))
    dataset = read_splits(splits_path, task=Task(opts["task"]))
    graph, x, y = _load_partition(emb, dataset, graph_dir, split)
    y_hat, _ = predict(model, graph, x)
    write_predictions(graph.node_ids, y, y_hat, out / f"predictions_{split.value}.tsv")
    print(f"{split.value}: wrote {graph.n_nodes} predictions")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    opts = resolve(args)
    results = gradcheck_mod.run_all(seed=opts["seed"])
    width = max(len(r.op) for r in results)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  max_rel_error {r.max_rel_error:.3e}  ({r.coords_checked} coords)  {status}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} ops within {gradcheck_mod.TOLERANCE:g} relative error")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="civigraph", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse corpus, aggregate labels, balance, split")
    p.add_argument("--comments", help="comments TSV (rev_id, comment, namespace)")
    p.add_argument("--annotations", help="annotations TSV (rev_id, worker_id, label)")
    _opt(p, "--ratios", "ratios", str, "train,val,test ratio")
    _common_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-graph", help="build per-partition similarity graphs")
    p.add_argument("--embeddings", help="EMB1 embedding file")
    p.add_argument("--splits", help="splits TSV from ingest")
    _opt(p, "--block-size", "block_size", int, "similarity block rows")
    _common_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train the hybrid model on the train/val graphs")
    p.add_argument("--embeddings", help="EMB1 embedding file")
    p.add_argument("--splits", help="splits TSV")
    p.add_argument("--graph-dir", dest="graph_dir", help="directory with graph_train/val .grf1 files")
    _opt(p, "--hidden-dim", "hidden_dim", int, "branch representation width")
    _opt(p, "--gnn-layers", "gnn_layers", int, "number of GAT layers")
    _opt(p, "--heads", "heads", int, "attention heads in intermediate GAT layers")
    _opt(p, "--attention-hidden", "attention_hidden", int, "fusion attention hidden width")
    _opt(p, "--dropout", "dropout_p", float, "dropout probability in MLP parts")
    _opt(p, "--lr", "lr", float, "Adam learning rate")
    _opt(p, "--weight-decay", "weight_decay", float, "decoupled weight decay")
    _opt(p, "--max-epochs", "max_epochs", int, "epoch cap")
    _opt(p, "--patience", "patience", int, "early-stopping patience in epochs")
    _opt(p, "--log-every", "log_every", int, "epochs between progress lines (0 = quiet)")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one partition")
    p.add_argument("--checkpoint", help="MDL1 checkpoint file")
    p.add_argument("--embeddings", help="EMB1 embedding file")
    p.add_argument("--splits", help="splits TSV")
    p.add_argument("--graph-dir", dest="graph_dir", help="directory with graph_*.grf1 files")
    _opt(p, "--split", "split", str, "partition to score", choices=[s.value for s in Split])
    _opt(p, "--threshold", "threshold", float, "hard-label decision threshold")
    p.add_argument("--train-gap", dest="train_gap", action="store_true", default=None,
                   help="also score the train graph and report the train-test AUC gap (default: False)")
    _common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="dump predictions for one partition")
    p.add_argument("--checkpoint", help="MDL1 checkpoint file")
    p.add_argument("--embeddings", help="EMB1 embedding file")
    p.add_argument("--splits", help="splits TSV")
    p.add_argument("--graph-dir", dest="graph_dir", help="directory with graph_*.grf1 files")
    _opt(p, "--split", "split", str, "partition to predict", choices=[s.value for s in Split])
    _common_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
