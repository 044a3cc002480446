"""Deterministic random streams.

Every source of randomness in the toolkit (weight init, data shuffling,
epsilon-greedy exploration, teacher forcing, ...) draws from its own named
substream of a counter-based Philox generator. Substreams are derived from
(seed, purpose...) with a stable hash, so runs reproduce bit-for-bit across
processes and platforms and adding a new consumer never perturbs existing
ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *purpose) -> np.random.Generator:
    """Return the named Philox substream for (seed, *purpose).

    `purpose` components may be strings or ints; the same components always
    yield the same stream. Python's builtin hash() is salted per process, so
    the key is derived with blake2b instead.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for part in purpose:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(8, "little", signed=True))
        else:
            h.update(b"s" + str(part).encode("utf-8"))
        h.update(b"\x00")
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
