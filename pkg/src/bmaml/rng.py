"""Counter-based random streams keyed by (seed, purpose, indices)."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, tag, *index)``.

    Streams depend only on their key, so drawing from one never shifts another;
    results are unchanged whatever order tasks or particles are processed in.
    """
    key = (zlib.crc32(tag.encode("utf-8")),) + tuple(int(i) for i in index)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
