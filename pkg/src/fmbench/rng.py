"""Deterministic, platform-independent random streams.

Two kinds of randomness are used in the harness:

* splitmix64 counter streams for anything that must be bit-identical across
  platforms and numpy versions (the toy encoder's projections and positional
  codes, per-instance seed derivation);
* ``numpy.random.Generator`` (PCG64) for sampling inside protocols, always
  constructed from an explicit seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(values: np.ndarray) -> np.ndarray:
    """Finalize uint64 values with the splitmix64 mixing function."""
    z = np.asarray(values, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def uniform_stream(key: int, n: int) -> np.ndarray:
    """n floats in [-1, 1), counter-mode splitmix64 stream under ``key``."""
    with np.errstate(over="ignore"):
        counters = (np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
                    + np.uint64(key & (2**64 - 1)))
    bits = splitmix64(counters)
    # top 53 bits -> [0,1) double, then affine to [-1,1)
    u01 = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return 2.0 * u01 - 1.0


def derive_key(seed: int, *parts) -> int:
    """Stable 64-bit key from a seed and string/int parts (sha256-based)."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little")


def generator(seed: int, *parts) -> np.random.Generator:
    """Seeded PCG64 generator; extra parts decorrelate sub-streams."""
    if parts:
        return np.random.default_rng(derive_key(seed, *parts))
    return np.random.default_rng(int(seed))
