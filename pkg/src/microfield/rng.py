"""Deterministic random streams derived from (seed, purpose tags).

Every stochastic operation in the package draws from a stream keyed by the
run seed plus a tuple of tags (strings or integers).  Streams are
counter-based (Philox), so construction order and thread scheduling never
affect the numbers a given consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, parts: tuple) -> np.ndarray:
    blob = repr((int(seed),) + tuple(parts)).encode()
    digest = hashlib.sha256(blob).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def stream(seed: int, *parts) -> np.random.Generator:
    """Generator for the stream identified by (seed, *parts)."""
    return np.random.Generator(np.random.Philox(key=_key(seed, parts)))


def pixel_stream(seed: int, pixel_index: int) -> np.random.Generator:
    """Per-pixel render stream; cheap enough to build for every ray."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(pixel_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
