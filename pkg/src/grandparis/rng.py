"""Reproducible random streams.

A stream is addressed by (seed, stream_id). Child streams are derived by
folding integer key components into the id with a splitmix64-style mixer,
so per-step and per-purpose generators are reproducible independently of
scheduling. Generators are numpy PCG64 seeded through SeedSequence, which
provides the actual stream separation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(h: int, v: int) -> int:
    # splitmix64 finalizer; full avalanche so derived ids never collide in practice
    h = (h + 0x9E3779B97F4A7C15 + v) & _MASK64
    h ^= h >> 30
    h = (h * 0xBF58476D1CE4E5B9) & _MASK64
    h ^= h >> 27
    h = (h * 0x94D049BB133111EB) & _MASK64
    return (h ^ (h >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """Addressable random stream: same (seed, stream_id) -> same draws."""

    seed: int
    stream_id: int = 0

    def derive(self, *key: int) -> "RngStream":
        """Child stream for the given key path (order-sensitive)."""
        h = self.stream_id
        for part in key:
            h = _mix(h, int(part) & _MASK64)
        return RngStream(self.seed, h)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))
