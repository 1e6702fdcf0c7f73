"""Counter-based random streams.

Every random draw in the simulation is keyed by a tuple of integers
(runner seed, stream tag, client id, counter).  Two draws with different
keys never share state, so results do not depend on the order in which
clients are processed or on how many workers execute them.
"""

from __future__ import annotations

import zlib

import numpy as np

# Stream tags.  Strings are hashed with crc32 so new tags need no registry.
SHUFFLE = "shuffle"
AVAILABILITY = "availability"
LATENCY = "latency"
COMPLETENESS = "completeness"
DROP = "drop"
SELECT = "select"
PROFILE = "profile"
PARTITION = "partition"
INIT = "init"


def tag_id(tag: str | int) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag)


def stream(seed: int, tag: str | int, *counters: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *counters)``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag_id(tag)]
    key.extend(int(c) for c in counters)
    if any(c < 0 for c in key):
        raise ValueError(f"stream key must be non-negative, got {key}")
    return np.random.default_rng(np.random.SeedSequence(key))


class TickUniforms:
    """Per-client uniform draws addressed by integer tick.

    ``value(t)`` depends only on (seed, tag, client, t).  Draws are generated
    in fixed-size blocks so long horizons stay cheap.
    """

    BLOCK = 4096

    def __init__(self, seed: int, tag: str, client: int):
        self.seed = seed
        self.tag = tag
        self.client = client
        self._block_id = -1
        self._block: np.ndarray | None = None

    def value(self, tick: int) -> float:
        block_id, offset = divmod(int(tick), self.BLOCK)
        if block_id != self._block_id:
            self._block = stream(self.seed, self.tag, self.client, block_id).random(self.BLOCK)
            self._block_id = block_id
        return float(self._block[offset])
