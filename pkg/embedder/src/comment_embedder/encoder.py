"""Sentence-encoder loading. Imported lazily so the pipeline and its tests
run without the transformer stack installed."""

from __future__ import annotations

import numpy as np

DEFAULT_MODEL = "all-mpnet-base-v2"


class SentenceTransformerEncoder:
    """Thin wrapper pinning the interface the pipeline needs:
    ``encode(texts, batch_size) -> float32 [n, dim]`` plus ``dim`` and
    ``revision`` for the sidecar."""

    def __init__(self, model_name: str = DEFAULT_MODEL, device: str | None = None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise RuntimeError(
                "sentence-transformers is not installed; pip install sentence-transformers"
            ) from exc
        try:
            self._model = SentenceTransformer(model_name, device=device)
        except Exception as exc:
            raise RuntimeError(f"failed to load encoder {model_name!r}: {exc}") from exc
        self.model_name = model_name
        self.dim = int(self._model.get_sentence_embedding_dimension())
        self.revision = self._detect_revision()

    def _detect_revision(self) -> str:
        try:
            return str(self._model._first_module().auto_model.config._commit_hash)
        except Exception:
            return "unknown"

    def encode(self, texts: list[str], batch_size: int = 64) -> np.ndarray:
        out = self._model.encode(
            texts,
            batch_size=batch_size,
            convert_to_numpy=True,
            normalize_embeddings=True,
            show_progress_bar=False,
        )
        return np.asarray(out, dtype=np.float32)


def load_encoder(model_name: str = DEFAULT_MODEL, device: str | None = None) -> SentenceTransformerEncoder:
    return SentenceTransformerEncoder(model_name, device=device)
