"""Seed-derived random streams.

Every stochastic component draws from a generator built by :func:`stream`,
keyed by the run seed plus integer stream coordinates (replicate,
participant, purpose, ...). Streams with different keys are statistically
independent and do not depend on execution order.
"""
import numpy as np

MASK64 = (1 << 64) - 1


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed: int, *key: int) -> int:
    """A 64-bit integer seed deterministically derived from (seed, key)."""
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
