"""
Seeded random generators. Every stochastic component draws from numpy's
PCG64 bit generator, whose output stream is fixed across platforms, and
independent child seeds are derived with `SeedSequence.spawn`.
"""

from typing import List

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Generator for a 64-bit seed"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_seeds(seed: int, count: int) -> List[int]:
    """Derive `count` independent 64-bit seeds from `seed`"""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by `seed` and a path of integers, e.g. (depth, epoch)"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))
