"""Named, seedable random streams.

Every stochastic consumer (initialisation, dropout, augmentation, shuffling)
asks for its own stream by name.  Streams are Philox generators keyed by a
hash of ``(seed, *path)``, so the numbers a consumer sees never depend on how
many other consumers ran before it, or on which worker it runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *path) -> int:
    payload = repr((int(seed),) + tuple(str(p) for p in path)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Return an independent generator for the stream named ``path``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def derive_seed(seed: int, *path) -> int:
    """Derive a plain 63-bit integer seed, e.g. a per-fold seed."""
    return stream_key(seed, *path) & ((1 << 63) - 1)
