"""Comments TSV -> EMB1 pipeline.

The TSV has a header row and columns ``rev_id\tcomment\tnamespace``;
newlines inside comments arrive as the literal token ``NEWLINE_TOKEN`` and
are restored before encoding. One embedding row is written per comment,
row ids aligned to rev_ids, plus a JSON sidecar with the encoder identity.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from comment_embedder.emb1 import read_emb1, write_emb1

log = logging.getLogger(__name__)

NEWLINE_TOKEN = "NEWLINE_TOKEN"
TAB_TOKEN = "TAB_TOKEN"


@dataclass
class EmbedJob:
    input_tsv: Path
    output_emb1: Path
    model: str = "all-mpnet-base-v2"
    batch_size: int = 64
    device: str | None = None

    def __post_init__(self):
        self.input_tsv = Path(self.input_tsv)
        self.output_emb1 = Path(self.output_emb1)
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def restore_text(raw: str) -> str:
    return raw.replace(NEWLINE_TOKEN, "\n").replace(TAB_TOKEN, "\t")


def read_comments_tsv(path: Path) -> tuple[list[int], list[str]]:
    """Parse rev_ids and restored comment texts, keeping file order."""
    rev_ids: list[int] = []
    texts: list[str] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["rev_id", "comment"]:
            raise ValueError(f"{path}: expected header starting 'rev_id\\tcomment', got {header[:2]}")
        for lineno, raw in enumerate(fh, start=2):
            if raw.strip() == "":
                continue
            cols = raw.rstrip("\n").split("\t")
            if len(cols) < 2:
                raise ValueError(f"{path}:{lineno}: expected at least 2 columns, got {len(cols)}")
            try:
                rev_ids.append(int(cols[0]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: rev_id is not an integer: {cols[0]!r}") from None
            texts.append(restore_text(cols[1]))
    return rev_ids, texts


def embed_corpus(job: EmbedJob, encoder=None) -> dict:
    """Encode every comment and write the EMB1 file plus sidecar JSON.

    `encoder` defaults to the sentence-transformers model named in the job;
    anything with ``encode(texts, batch_size)``, ``dim``, ``model_name``
    and ``revision`` works (tests inject a deterministic stub).
    Returns the sidecar dict.
    """
    if encoder is None:
        from comment_embedder.encoder import load_encoder

        encoder = load_encoder(job.model, device=job.device)

    rev_ids, texts = read_comments_tsv(job.input_tsv)
    for i, text in enumerate(texts):
        if text == "":
            log.warning("rev_id %d has empty text; encoding a single space instead", rev_ids[i])
            texts[i] = " "

    chunks = []
    for start in range(0, len(texts), job.batch_size):
        chunks.append(encoder.encode(texts[start : start + job.batch_size], batch_size=job.batch_size))
    values = np.vstack(chunks) if chunks else np.zeros((0, encoder.dim), dtype=np.float32)
    if values.shape != (len(texts), encoder.dim):
        raise RuntimeError(f"encoder returned {values.shape}, expected ({len(texts)}, {encoder.dim})")

    norms = np.linalg.norm(values.astype(np.float64), axis=1)
    off = np.flatnonzero(np.abs(norms - 1.0) > 1e-3)
    if off.size:
        log.warning("%d rows are not unit-normalized (max dev %.2e); downstream re-normalizes",
                    off.size, float(np.abs(norms - 1.0).max()))

    write_emb1(values, np.asarray(rev_ids, dtype=np.uint64), job.output_emb1)
    back_values, back_ids = read_emb1(job.output_emb1)
    if back_values.shape != values.shape or not np.array_equal(back_ids, np.asarray(rev_ids, dtype=np.uint64)):
        raise RuntimeError(f"{job.output_emb1}: post-write verification failed")

    sidecar = {
        "model": getattr(encoder, "model_name", job.model),
        "revision": getattr(encoder, "revision", "unknown"),
        "dim": int(encoder.dim),
        "rows": len(rev_ids),
        "batch_size": job.batch_size,
    }
    sidecar_path = job.output_emb1.with_suffix(job.output_emb1.suffix + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar
