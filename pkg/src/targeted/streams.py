"""Seeded random streams.

Every generator in the package is a Philox counter-based bit generator, so a
stream is fully determined by its seed (an int or a ``SeedSequence``).
"""

import numpy as np


def make_rng(seed=None) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))
