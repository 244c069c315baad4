"""Keyed pseudorandom primitives shared by every component.

All integers fed to the hash are encoded as 4-byte little-endian words
(two's complement, truncated to 32 bits). The pipeline is:

    h  = FNV-1a-64(context tokens..., salt)
    u  = (SplitMix64(key XOR h) >> 11) * 2**-53

``SplitMix64(x)`` here is a single output step from state ``x``: add the
golden-ratio increment, then apply the two xor-shift-multiply rounds.
These pure-Python versions are the bit-exact reference; the numba kernels
in ``_kernels`` must agree with them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV53 = 2.0**-53


def fnv1a64(values: Iterable[int], h: int = FNV_OFFSET) -> int:
    for v in values:
        for byte in (int(v) & 0xFFFFFFFF).to_bytes(4, "little"):
            h ^= byte
            h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def to_unit(x: int) -> float:
    """Top 53 bits of a 64-bit word as a float in [0, 1)."""
    return (x >> 11) * _INV53


def prf_uniform(key: int, context: Iterable[int], salt: int) -> float:
    h = fnv1a64([*context, salt])
    return to_unit(splitmix64((int(key) & MASK64) ^ h))


def derive_seed(master_seed: int, *parts: int) -> int:
    """Child seed for a labelled sub-stream: SplitMix64(master XOR FNV(parts))."""
    return splitmix64((int(master_seed) & MASK64) ^ fnv1a64(parts))


@dataclass
class RandomStream:
    """Counter-based uniform stream (the SplitMix64 sequence seeded at ``seed``).

    Draw ``j`` is ``to_unit(splitmix64(seed + j * GOLDEN))`` so any draw can be
    computed without replaying the previous ones.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & MASK64

    def uniform(self) -> float:
        u = stream_uniform(self.seed, self.counter)
        self.counter += 1
        return u


def stream_uniform(seed: int, counter: int) -> float:
    return to_unit(splitmix64((seed + counter * GOLDEN) & MASK64))
