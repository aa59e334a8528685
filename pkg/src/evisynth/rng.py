"""Reproducible random streams.

All randomness flows through numpy's Philox4x64-10 counter-based generator.
Substreams are derived from the master seed via SeedSequence spawn keys, so
a (seed, path) pair yields the same stream on every platform and at every
parallelism level. Stream roles get distinct leading path components to
keep them collision-free.
"""

from __future__ import annotations

import numpy as np

# leading path component per role
CHAIN = 0
INIT = 1
TRUTH = 2
TABLES = 3
REPLICATE = 4


def make_stream(seed: int, *path: int) -> np.random.Generator:
    """Philox stream for (seed, path); identical across platforms."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
