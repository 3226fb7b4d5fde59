"""Deterministic random-stream derivation.

Every random decision in the package flows from one 64-bit seed. Each
consumer (negative subsampling, split shuffles, weight init, dropout, ...)
gets its own counter-based Philox stream, so adding or reordering one
consumer never perturbs the draws of another.
"""

from __future__ import annotations

import numpy as np

STREAM_BALANCE = 1
STREAM_SPLIT = 2
STREAM_MODEL_INIT = 3
STREAM_DROPOUT = 4
STREAM_GRADCHECK = 5
STREAM_SYNTH = 6


def derive_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Return an independent generator for (seed, stream, *extra)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), *(int(e) for e in extra)))
    return np.random.Generator(np.random.Philox(ss))
