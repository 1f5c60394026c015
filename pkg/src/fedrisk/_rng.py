"""Named random streams derived from a master seed.

Streams are keyed by strings such as a site id and an epoch index, never by
call order, so results do not depend on how work is scheduled.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and not isinstance(part, bool):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def derive_int(seed: int, *keys) -> int:
    return int(derive_seed(seed, *keys).generate_state(1)[0])
