"""Counter-based RNG streams (Philox) keyed by (seed, tags...).

Each (seed, tags) pair addresses an independent stream, so per-sample work can
run in any order, or in parallel, with bit-identical results.
"""

from __future__ import annotations

import numpy as np

_MIX = np.uint64(0x9E3779B97F4A7C15)


def _combine(tags: tuple[int, ...]) -> np.uint64:
    acc = np.uint64(0x243F6A8885A308D3)
    with np.errstate(over="ignore"):
        for t in tags:
            acc = (acc ^ np.uint64(t & 0xFFFFFFFFFFFFFFFF)) * _MIX
    return acc


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for (seed, *tags); deterministic across processes."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), _combine(tags)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
