"""Counter-based random streams keyed by integer tuples.

Every random draw in the package (masks, shuffles, augmentation, init) is a
pure function of a key such as ``(seed, epoch, step, layer)``.  Draws do not
depend on call order, so sharding or reordering work cannot change results.
Philox is a counter-based generator with a platform-independent output
sequence.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams for different purposes disjoint.
MASK = 1
SHUFFLE = 2
AUGMENT = 3
INIT = 4
DATA = 5


def keyed(*key: int) -> np.random.Generator:
    words = [int(k) for k in key]
    if any(k < 0 for k in words):
        raise ValueError(f"rng key components must be non-negative: {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def bernoulli_keep(key, shape, keep: float) -> np.ndarray:
    """Draw {0,1} gates with P(1) = ``keep`` as float64."""
    u = keyed(*key).random(shape)
    return (u < keep).astype(np.float64)
