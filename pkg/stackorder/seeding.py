"""Named random sub-streams derived from a single seed."""

import numpy as np

STREAMS = {
    "env": 0,
    "upper": 1,
    "lower": 2,
    "eval": 3,
    "init": 4,
}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one component.

    Each stream is keyed by (seed, stream id), so drawing more numbers from one stream never shifts another.
    """
    if name not in STREAMS:
        raise KeyError(f"unknown random stream '{name}'")
    return np.random.default_rng([seed, STREAMS[name]])
