"""Named, seedable random streams.

Every stochastic operation receives an explicit ``numpy.random.Generator``.
Streams are Philox (counter-based) generators keyed by a seed and a path of
names, so two consumers asking for different names never share state and
adding a consumer never perturbs another one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Return the generator for ``(seed, *names)``; same arguments, same draws."""
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for name in names:
        entropy.extend(_words(str(name)))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
