"""Seeded random streams.

Every random draw in the package comes from numpy's PCG64 generator. A
``(seed, purpose, *extra)`` triple picks an independent stream through
``SeedSequence`` spawn keys, so weight init, shuffling, augmentation and
baseline selection never share state.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {"init": 0, "shuffle": 1, "augment": 2, "select": 3, "data": 4, "inputs": 5}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    key = (PURPOSES[purpose],) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation of ``range(n)``: for i = n-1..1 swap i with j ~ U{0..i}."""
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
