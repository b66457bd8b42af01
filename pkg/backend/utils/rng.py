import numpy as np

# stream ids keep initialisation, dropout and shuffling independent of each other
INIT_STREAM = 0
DROPOUT_STREAM = 1
SHUFFLE_STREAM = 2

_MASK64 = (1 << 64) - 1


def philox_rng(seed: int, *path: int) -> np.random.Generator:
    """Counter-based generator addressed by (seed, *path).

    Any node of the path tree can be reached directly, so the numbers drawn for
    one micro-batch never depend on how many were drawn elsewhere.
    """
    entropy = [seed & _MASK64, *(p & _MASK64 for p in path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
