"""Reproducible randomness via counter-based streams.

Every stochastic site in the library (parameter init, epsilon draws, dropout
masks, epoch shuffles) pulls its own independent stream derived from
(global_seed, site_id, step). Streams are Philox counter-based generators
keyed by a BLAKE2 hash of that triple, so any single site is bit-reproducible
regardless of what every other site consumed.
"""

import hashlib

import numpy as np


class StreamHub:
    """Factory of independent ``numpy.random.Generator`` streams.

    One hub per run, keyed by the global seed. ``stream(site, step)`` is a
    pure function of its arguments: calling it twice yields two generators
    that produce identical sequences.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, site: str, step: int = 0) -> np.random.Generator:
        token = f"{self.seed}|{site}|{step}".encode()
        digest = hashlib.blake2b(token, digest_size=16).digest()
        key = np.frombuffer(digest, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))
