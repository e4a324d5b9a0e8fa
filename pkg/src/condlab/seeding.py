"""Deterministic seed splitting for sweep cells.

The per-cell seed is ``splitmix64(splitmix64(root) ^ index)`` with all
arithmetic modulo 2**64, where

    splitmix64(x):
        z = (x + 0x9E3779B97F4A7C15) mod 2**64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
        return z ^ (z >> 31)

The result is reduced to 63 bits so it is a valid non-negative seed for
every common generator.
"""

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def cell_seed(root: int, index: int) -> int:
    if index < 0:
        raise ValueError("cell index must be non-negative")
    return splitmix64(splitmix64(root & MASK64) ^ (index & MASK64)) >> 1
