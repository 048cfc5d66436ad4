"""Seed derivation.

Everything random in the package flows from one 64-bit seed. Independent
streams (per tree, per repeat, per fold, ...) get their own seeds through
`derive`, a SplitMix64 step, so that e.g. adding trees to a forest never
changes the seeds of the trees that already exist.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream tags. Chained with derive() to keep unrelated uses of the same
# (seed, index) apart.
TREE = 0x01
SUBSAMPLE = 0x02
SPLIT = 0x03
FOLD = 0x04
REPEAT = 0x05
TRIAL = 0x06


def derive(seed: int, index: int) -> int:
    """SplitMix64 of seed advanced by index+1 increments."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def generator(seed: int) -> np.random.Generator:
    """PCG64 generator for a derived seed."""
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
