"""Named random sub-streams derived from one top-level seed.

Each component (data, init, mix, shuffle, corruption, ...) draws from its own
generator so changing how much randomness one component consumes never
perturbs the others.
"""
import zlib

import numpy as np

STREAMS = ("data", "split", "init", "mix", "shuffle", "corruption", "kmeans")


def stream(seed, name):
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), key])
