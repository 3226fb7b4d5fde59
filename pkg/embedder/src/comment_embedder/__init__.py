"""Batch sentence-embedding of comment TSVs into EMB1 files.

Keeps the transformer runtime out of the downstream graph engine: this
package reads the comments TSV, encodes with a pinned sentence encoder,
and writes the binary EMB1 format plus a JSON sidecar recording the model
name, revision, dimension and row count.
"""

__version__ = "0.1.0"

from comment_embedder.emb1 import read_emb1, write_emb1
from comment_embedder.pipeline import EmbedJob, embed_corpus, read_comments_tsv

__all__ = ["EmbedJob", "embed_corpus", "read_comments_tsv", "read_emb1", "write_emb1"]
