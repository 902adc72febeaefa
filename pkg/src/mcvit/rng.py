"""Deterministic random streams.

Every stochastic component draws from its own named stream so that runs are
reproducible and components can be reseeded independently. A stream is a
numpy PCG64 generator keyed by ``blake2b(seed | purpose | counter)``; the
same (seed, purpose, counter) triple always yields the same sequence.
"""

import hashlib

import numpy as np

__all__ = ["stream", "stream_seed"]


def stream_seed(seed: int, purpose: str, counter: int = 0) -> int:
    """64-bit sub-seed derived by hashing (seed, purpose, counter)."""
    key = f"{seed}|{purpose}|{counter}".encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, purpose: str, counter: int = 0) -> np.random.Generator:
    """Independent generator for one named purpose under a master seed."""
    return np.random.Generator(np.random.PCG64(stream_seed(seed, purpose, counter)))
