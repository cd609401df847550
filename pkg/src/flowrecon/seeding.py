"""Deterministic derivation of random streams from one master seed.

Every random draw in the package comes from a generator built here, keyed by
a purpose tag plus optional trial and layer indices.  Streams for different
keys are statistically independent, and a given key always yields the same
stream, so results do not depend on execution order or on how many worker
threads consume the trials.
"""
from __future__ import annotations

import numpy as np

# Purpose tags.  These are part of the on-disk reproducibility contract:
# renumbering them would silently change every seeded run, so new purposes
# must be appended, never inserted.
FIRM_ACTIVITY = 1
HOUSEHOLD_SECTORS = 2
LAYER_SAMPLING = 3


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Return the generator for one purpose.

    ``path`` identifies the consumer, e.g. ``(LAYER_SAMPLING, trial, layer)``.
    """
    entropy = (int(master_seed),) + tuple(int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy))
