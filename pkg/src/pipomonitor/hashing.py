"""Seedable 64-bit mixing functions used by the filter.

All three hash roles (bucket index, fingerprint, fingerprint-to-offset) are
instances of the same splitmix64 finalizer keyed by a different salt. The
numpy variants produce bit-identical results and are used for bulk work
(uniformity checks, white-box address search, FPR sweeps).
"""

import numpy as np

MASK64 = (1 << 64) - 1
LINE_BITS = 6

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

# role tags, xored into the user seed
ROLE_INDEX = 0x1
ROLE_FINGERPRINT = 0x2
ROLE_OFFSET = 0x3


def mix64(x: int, salt: int = 0) -> int:
    z = (x + salt * _GOLDEN + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x, salt: int = 0) -> np.ndarray:
    """Vectorised :func:`mix64` over a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64((salt * _GOLDEN + _GOLDEN) & MASK64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def role_salt(hash_seed: int, role: int) -> int:
    return mix64(hash_seed & MASK64, role)


def line_of(addr: int) -> int:
    """Cache-line number of a byte address (offset bits ignored)."""
    return (addr & MASK64) >> LINE_BITS
