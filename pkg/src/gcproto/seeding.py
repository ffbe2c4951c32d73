"""Named deterministic random substreams derived from one master seed.

Every randomized component (data generation, parameter init, dropout,
batch sampling) pulls its own generator via ``substream(seed, name)`` so
that changing one component's consumption pattern never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    """PCG64 generator for the (seed, name) pair; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_key(name),)))


def counter_stream(seed: int, name: str) -> np.random.Generator:
    """Philox (counter-based) generator; used for dropout masks."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_key(name),))
    return np.random.Generator(np.random.Philox(ss))
