"""Per-path random streams.

Each path gets its own Philox stream keyed by ``(seed, path_id)``, so the
numbers drawn by a path do not depend on how paths are split between
workers.  A step consumes a fixed block of uniforms whether or not all of
them are used, which keeps the simulation engines interchangeable.
"""
from __future__ import annotations

import numpy as np

__all__ = ["MASK64", "path_generator", "path_uniforms"]

MASK64 = (1 << 64) - 1


def path_generator(seed: int, path_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & MASK64, int(path_id) & MASK64]))


def path_uniforms(seed: int, paths, count: int) -> np.ndarray:
    """Array of shape ``(len(paths), count)`` with the first ``count`` uniforms of each path."""
    paths = list(paths)
    out = np.empty((len(paths), count), dtype=np.float64)
    for i, p in enumerate(paths):
        out[i] = path_generator(seed, p).random(count)
    return out
