import zlib

import numpy as np


def substream(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for one named stage of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())]))
