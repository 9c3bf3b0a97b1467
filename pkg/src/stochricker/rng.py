"""Reproducible random streams.

Streams are Philox (counter-based) generators keyed by a master seed and a
tuple of integers naming the stream, e.g. ``(trajectory_index,)`` or
``(experiment_id, k_index)``. The same key always yields the same stream, no
matter in which order or on which worker streams are created.
"""

import numpy as np


def make_rng(seed, *stream):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(rng)
