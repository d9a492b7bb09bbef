import numpy as np


def seed_sequence(seed) -> np.random.SeedSequence:
    """Independent SeedSequence for ``seed`` (int, entropy list or SeedSequence).

    A passed-in SeedSequence is copied because ``spawn`` mutates it.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)
