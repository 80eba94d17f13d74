"""Counter-based random streams.

Every stream is a Philox generator keyed by a `SeedSequence` built from a
master seed and a spawn path, e.g. ``substream(seed, ratee)`` for data
generation or ``substream(master, condition, replication)`` for a study.
Two streams with different paths never overlap and any stream can be
recreated on its own, so parallel work is reproducible regardless of
scheduling.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_TWO_53 = float(2 ** 53)


def substream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """A 64-bit seed for a child computation that itself splits into substreams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1) from 53-bit integers."""
    k = rng.integers(0, 2 ** 53, size=size, dtype=np.int64)
    return (k.astype(float) + 0.5) / _TWO_53


def inverse_cdf_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal variates by inverting the normal CDF of open uniforms."""
    return special.ndtri(open_uniform(rng, size))


__all__ = ["substream", "derive_seed", "open_uniform", "inverse_cdf_normal"]
