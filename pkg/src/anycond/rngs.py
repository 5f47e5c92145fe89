"""Deterministic RNG substreams.

Every stochastic operation in the package draws from an explicit
``numpy.random.Generator``. Substreams are derived from a base seed plus an
integer path, so independent pieces of work (mask sampling, importance
sampling, chain positions, ...) consume non-overlapping streams and results
are reproducible regardless of evaluation order or batching.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids; part of the reproducibility contract, do not renumber.
STREAM_INIT_PROPOSAL = 1
STREAM_INIT_ENERGY = 2
STREAM_MASKS = 3
STREAM_NOISE = 4
STREAM_DROPOUT = 5
STREAM_IMPORTANCE = 6
STREAM_VALIDATION = 7
STREAM_BATCH = 8
STREAM_ORDERING = 9
STREAM_RESAMPLE = 10
STREAM_EVAL = 11
STREAM_FINETUNE = 12


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream identified by ``path`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(path))))
