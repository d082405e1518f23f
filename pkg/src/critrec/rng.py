"""Seeded random streams.

A ``RandomStream`` is identified by ``(seed, replica)``; named substreams are
independent PCG64 generators derived through ``numpy.random.SeedSequence``
spawn keys, so any replica (or any substream of it) can be reproduced in
isolation.
"""
from __future__ import annotations

import numpy as np

_SUBSTREAMS = {
    "main": 0,        # log A, one per step
    "aux": 1,         # standard normals behind B, C, D
    "fresh_log": 2,   # independent log A' for per-visit functionals
    "fresh_aux": 3,   # independent B', C', D'
    "burn": 4,        # embedded-chain burn-in run
    "mc": 5,          # quadrature-side Monte Carlo (psi, convolutions)
    "burn_aux": 6,    # B, C, D normals of the burn-in run
}


class RandomStream:
    def __init__(self, seed: int, replica: int = 0, purpose: int = 0):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.replica = int(replica)
        self.purpose = int(purpose)
        self._cache = {}

    def generator(self, name: str) -> np.random.Generator:
        """The generator for substream ``name``; repeated calls share state."""
        if name not in self._cache:
            idx = _SUBSTREAMS[name]
            ss = np.random.SeedSequence(self.seed, spawn_key=(self.purpose, self.replica, idx))
            self._cache[name] = np.random.Generator(np.random.PCG64(ss))
        return self._cache[name]

    def child(self, purpose: int) -> "RandomStream":
        """An independent stream for the same replica (e.g. a second run phase)."""
        return RandomStream(self.seed, self.replica, purpose)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, replica={self.replica}, purpose={self.purpose})"
