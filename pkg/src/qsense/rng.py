"""Counter-based random streams keyed by (master seed, purpose tag, index).

Each episode draws from its own Philox stream, so results do not depend on how
episodes are grouped into batches or distributed over workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, tag, index) triple."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    ss = np.random.SeedSequence([int(seed), _tag_key(tag), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def streams(seed: int, tag: str, indices) -> list[np.random.Generator]:
    return [stream(seed, tag, int(i)) for i in indices]
