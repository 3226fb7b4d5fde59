"""Corpus parsing, crowd-label aggregation, balanced stratified splits, and
the EMB1 embedding file format.

Input formats (all UTF-8):
  comments TSV     header ``rev_id\tcomment\tnamespace``; newlines inside a
                   comment are pre-escaped as the literal token
                   ``NEWLINE_TOKEN``.
  annotations TSV  header ``rev_id\tworker_id\tlabel`` with label in {0,1}.
  splits TSV       header ``rev_id\tlabel\tsplit`` with split in
                   {train,val,test}.
  EMB1             magic ``EMB1`` | u32 N | u32 d | N x u64 row ids |
                   N*d float32 row-major values, all little-endian.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from civigraph.fileio import atomic_write_bytes, atomic_write_text
from civigraph.rng import STREAM_BALANCE, STREAM_SPLIT, derive_rng

log = logging.getLogger(__name__)

EMB_MAGIC = b"EMB1"
# Refuse headers whose payload would exceed 2^31 floats (8 GiB); anything
# bigger is a corrupt or hostile header, not a real corpus.
MAX_EMB_ELEMENTS = 2**31


class Task(str, Enum):
    ATTACK = "attack"
    AGGRESSION = "aggression"
    TOXICITY = "toxicity"


class Namespace(str, Enum):
    USER_TALK = "user_talk"
    ARTICLE_TALK = "article_talk"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# The public corpus release abbreviates namespaces; accept both spellings.
_NAMESPACE_ALIASES = {
    "user_talk": Namespace.USER_TALK,
    "article_talk": Namespace.ARTICLE_TALK,
    "user": Namespace.USER_TALK,
    "article": Namespace.ARTICLE_TALK,
}


class CorpusFormatError(ValueError):
    """Malformed corpus row; carries file, line number and column."""

    def __init__(self, file: str | Path, line: int, column: str, message: str):
        self.file = str(file)
        self.line = line
        self.column = column
        super().__init__(f"{file}:{line}: column '{column}': {message}")


class EmbeddingFormatError(ValueError):
    """Base class for EMB1 file problems."""


class EmbeddingMagicError(EmbeddingFormatError):
    pass


class EmbeddingTruncatedError(EmbeddingFormatError):
    pass


class EmbeddingOverflowError(EmbeddingFormatError):
    pass


@dataclass
class CommentRecord:
    comment_id: int
    text: str
    namespace: Namespace
    char_length: int


@dataclass
class AnnotationSet:
    comment_id: int
    worker_votes: list[int]


@dataclass
class SplitEntry:
    comment_id: int
    label: int
    split: Split


@dataclass
class LabeledDataset:
    task: Task
    entries: list[SplitEntry]
    seed: int | None = None

    def ids_for(self, split: Split) -> list[int]:
        return [e.comment_id for e in self.entries if e.split == split]

    def labels_for(self, split: Split) -> np.ndarray:
        return np.array([e.label for e in self.entries if e.split == split], dtype=np.int64)


@dataclass
class EmbeddingMatrix:
    """Row-major float32 embedding matrix with aligned comment ids."""

    values: np.ndarray
    row_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.row_ids = np.asarray(self.row_ids, dtype=np.uint64)
        if self.values.ndim != 2:
            raise ValueError(f"embedding values must be 2-D, got shape {self.values.shape}")
        if self.row_ids.shape != (self.values.shape[0],):
            raise ValueError("row_ids length must equal the number of embedding rows")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _split_row(raw: str) -> list[str]:
    return raw.rstrip("\n").rstrip("\r").split("\t")


def parse_corpus(
    comments_file: str | Path, annotations_file: str | Path
) -> tuple[list[CommentRecord], list[AnnotationSet]]:
    """Parse the comments and annotations TSVs.

    Returns comment records in source order and one AnnotationSet per
    comment id that has at least one annotation (first-seen order).
    Raises CorpusFormatError naming file, line and column on any bad row.
    """
    comments: list[CommentRecord] = []
    seen_ids: set[int] = set()
    with open(comments_file, encoding="utf-8") as fh:
        header = fh.readline()
        if _split_row(header)[:3] != ["rev_id", "comment", "namespace"]:
            raise CorpusFormatError(comments_file, 1, "header", "expected 'rev_id\\tcomment\\tnamespace'")
        for lineno, raw in enumerate(fh, start=2):
            if raw.strip() == "":
                continue
            cols = _split_row(raw)
            if len(cols) != 3:
                raise CorpusFormatError(
                    comments_file, lineno, "row", f"expected 3 tab-separated columns, got {len(cols)}"
                )
            try:
                rev_id = int(cols[0])
            except ValueError:
                raise CorpusFormatError(comments_file, lineno, "rev_id", f"not an integer: {cols[0]!r}") from None
            if rev_id < 0:
                raise CorpusFormatError(comments_file, lineno, "rev_id", "must be non-negative")
            if rev_id in seen_ids:
                raise CorpusFormatError(comments_file, lineno, "rev_id", f"duplicate comment id {rev_id}")
            seen_ids.add(rev_id)
            ns = _NAMESPACE_ALIASES.get(cols[2].strip().lower())
            if ns is None:
                raise CorpusFormatError(comments_file, lineno, "namespace", f"unknown namespace {cols[2]!r}")
            text = cols[1]
            comments.append(CommentRecord(rev_id, text, ns, len(text)))

    votes: dict[int, list[int]] = {}
    with open(annotations_file, encoding="utf-8") as fh:
        header = fh.readline()
        if _split_row(header)[:3] != ["rev_id", "worker_id", "label"]:
            raise CorpusFormatError(annotations_file, 1, "header", "expected 'rev_id\\tworker_id\\tlabel'")
        for lineno, raw in enumerate(fh, start=2):
            if raw.strip() == "":
                continue
            cols = _split_row(raw)
            if len(cols) != 3:
                raise CorpusFormatError(
                    annotations_file, lineno, "row", f"expected 3 tab-separated columns, got {len(cols)}"
                )
            try:
                rev_id = int(cols[0])
            except ValueError:
                raise CorpusFormatError(annotations_file, lineno, "rev_id", f"not an integer: {cols[0]!r}") from None
            try:
                int(cols[1])
            except ValueError:
                raise CorpusFormatError(annotations_file, lineno, "worker_id", f"not an integer: {cols[1]!r}") from None
            label = cols[2].strip()
            if label not in ("0", "1"):
                raise CorpusFormatError(annotations_file, lineno, "label", f"must be 0 or 1, got {cols[2]!r}")
            votes.setdefault(rev_id, []).append(int(label))

    annotations = [AnnotationSet(cid, v) for cid, v in votes.items()]
    return comments, annotations


def aggregate_labels(annotations: Iterable[AnnotationSet]) -> dict[int, int]:
    """Majority vote per comment; ties resolve to the positive class."""
    labels: dict[int, int] = {}
    for ann in annotations:
        if not ann.worker_votes:
            raise ValueError(f"comment {ann.comment_id} has an empty vote list")
        if any(v not in (0, 1) for v in ann.worker_votes):
            raise ValueError(f"comment {ann.comment_id} has non-binary votes")
        positive = sum(ann.worker_votes)
        negative = len(ann.worker_votes) - positive
        labels[ann.comment_id] = 1 if positive >= negative else 0
    return labels


def balance_dataset(labels: dict[int, int], seed: int) -> list[int]:
    """Keep every positive; subsample negatives (seeded, without replacement)
    down to the positive count. Output is sorted by comment id."""
    positives = sorted(cid for cid, y in labels.items() if y == 1)
    negatives = sorted(cid for cid, y in labels.items() if y == 0)
    if not positives or not negatives:
        raise ValueError(
            f"cannot balance: {len(positives)} positive and {len(negatives)} negative labels"
        )
    if len(negatives) < len(positives):
        raise ValueError(
            f"cannot balance: only {len(negatives)} negatives for {len(positives)} positives"
        )
    rng = derive_rng(seed, STREAM_BALANCE)
    chosen = rng.choice(np.asarray(negatives, dtype=np.int64), size=len(positives), replace=False)
    return sorted(positives + [int(c) for c in chosen])


def _cut_points(m: int, ratios: Sequence[int]) -> tuple[int, int]:
    # Round-half-up boundaries at the cumulative ratios; keeps every split
    # within one item of the exact proportion.
    den = sum(ratios)
    c1 = ratios[0]
    c2 = ratios[0] + ratios[1]
    i1 = (2 * m * c1 + den) // (2 * den)
    i2 = (2 * m * c2 + den) // (2 * den)
    return int(i1), int(i2)


def split_dataset(
    ids: Sequence[int],
    labels: dict[int, int],
    ratios: tuple[int, int, int] = (8, 1, 1),
    seed: int = 0,
    task: Task = Task.TOXICITY,
) -> LabeledDataset:
    """Stratified train/val/test assignment.

    Within each class the ids are shuffled (seeded, one stream per class)
    and cut contiguously at the cumulative ratio boundaries, so per-class
    split sizes deviate from the exact proportion by at most one item.
    """
    if len(set(ids)) != len(ids):
        raise ValueError("ids contain duplicates")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    den = sum(ratios)

    entries: list[SplitEntry] = []
    for cls in (0, 1):
        cls_ids = np.asarray(sorted(cid for cid in ids if labels[cid] == cls), dtype=np.int64)
        m = len(cls_ids)
        if m < den:
            raise ValueError(
                f"class {cls} has only {m} items; need at least {den} for a {ratios} split"
            )
        rng = derive_rng(seed, STREAM_SPLIT, cls)
        shuffled = rng.permutation(cls_ids)
        i1, i2 = _cut_points(m, ratios)
        for cid in shuffled[:i1]:
            entries.append(SplitEntry(int(cid), cls, Split.TRAIN))
        for cid in shuffled[i1:i2]:
            entries.append(SplitEntry(int(cid), cls, Split.VAL))
        for cid in shuffled[i2:]:
            entries.append(SplitEntry(int(cid), cls, Split.TEST))

    entries.sort(key=lambda e: e.comment_id)
    return LabeledDataset(task=task, entries=entries, seed=seed)


def write_splits(dataset: LabeledDataset, path: str | Path) -> None:
    lines = ["rev_id\tlabel\tsplit"]
    lines += [f"{e.comment_id}\t{e.label}\t{e.split.value}" for e in dataset.entries]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_splits(path: str | Path, task: Task = Task.TOXICITY) -> LabeledDataset:
    entries: list[SplitEntry] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if _split_row(header)[:3] != ["rev_id", "label", "split"]:
            raise CorpusFormatError(path, 1, "header", "expected 'rev_id\\tlabel\\tsplit'")
        for lineno, raw in enumerate(fh, start=2):
            if raw.strip() == "":
                continue
            cols = _split_row(raw)
            if len(cols) != 3:
                raise CorpusFormatError(path, lineno, "row", f"expected 3 columns, got {len(cols)}")
            try:
                split = Split(cols[2].strip())
            except ValueError:
                raise CorpusFormatError(path, lineno, "split", f"unknown split {cols[2]!r}") from None
            if cols[1] not in ("0", "1"):
                raise CorpusFormatError(path, lineno, "label", f"must be 0 or 1, got {cols[1]!r}")
            entries.append(SplitEntry(int(cols[0]), int(cols[1]), split))
    return LabeledDataset(task=task, entries=entries, seed=None)


def save_embeddings(m: EmbeddingMatrix, file: str | Path) -> None:
    """Write the EMB1 binary format (see module docstring)."""
    header = struct.pack("<4sII", EMB_MAGIC, m.n_rows, m.dim)
    ids = np.ascontiguousarray(m.row_ids, dtype="<u8").tobytes()
    values = np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    atomic_write_bytes(file, header + ids + values)


def load_embeddings(file: str | Path) -> EmbeddingMatrix:
    """Read an EMB1 file; raises a distinct error per failure mode."""
    data = Path(file).read_bytes()
    if len(data) < 12:
        raise EmbeddingTruncatedError(f"{file}: file shorter than the 12-byte header")
    magic, n, d = struct.unpack_from("<4sII", data, 0)
    if magic != EMB_MAGIC:
        raise EmbeddingMagicError(f"{file}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if n * d > MAX_EMB_ELEMENTS:
        raise EmbeddingOverflowError(f"{file}: header claims {n}x{d} values, over the {MAX_EMB_ELEMENTS} limit")
    expected = 12 + 8 * n + 4 * n * d
    if len(data) < expected:
        raise EmbeddingTruncatedError(f"{file}: need {expected} bytes for {n}x{d}, file has {len(data)}")
    if len(data) > expected:
        raise EmbeddingFormatError(f"{file}: {len(data) - expected} trailing bytes after {n}x{d} payload")
    row_ids = np.frombuffer(data, dtype="<u8", count=n, offset=12)
    values = np.frombuffer(data, dtype="<f4", count=n * d, offset=12 + 8 * n).reshape(n, d)
    return EmbeddingMatrix(values=values.copy(), row_ids=row_ids.copy())


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale each row to unit L2 norm (computed in float64)."""
    v64 = m.values.astype(np.float64)
    norms = np.sqrt((v64 * v64).sum(axis=1))
    zero_rows = np.flatnonzero(norms == 0.0)
    if zero_rows.size:
        raise ValueError(f"zero-norm embedding rows: {zero_rows.tolist()}")
    return EmbeddingMatrix(values=(v64 / norms[:, None]).astype(np.float32), row_ids=m.row_ids)


def select_rows(m: EmbeddingMatrix, ids: Sequence[int]) -> EmbeddingMatrix:
    """Rows of `m` for the given comment ids, in the given order."""
    index = {int(cid): i for i, cid in enumerate(m.row_ids)}
    missing = [cid for cid in ids if int(cid) not in index]
    if missing:
        raise KeyError(f"{len(missing)} ids missing from embeddings (first: {missing[:5]})")
    rows = np.array([index[int(cid)] for cid in ids], dtype=np.int64)
    return EmbeddingMatrix(values=m.values[rows], row_ids=m.row_ids[rows])
