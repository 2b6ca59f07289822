"""Counter-based random streams.

Every stochastic routine in the package derives its generator from
``keyed_rng(master_seed, tag, index)``.  Streams are Philox-keyed by
(seed, tag-hash, index), so replicate ``i`` of scheme ``tag`` draws the
same numbers no matter how many workers run, in what order replicates
execute, or how large the total replicate count is.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: str) -> int:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def keyed_rng(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator for stream (master_seed, tag, index).

    Distinct (seed, tag, index) triples get distinct Philox keys, hence
    non-overlapping streams.
    """
    word0 = (int(master_seed) ^ _tag_word(tag)) & _MASK64
    key = np.array([word0, int(index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def spawn_seed(master_seed: int, tag: str, index: int = 0) -> int:
    """Derive a child master seed, for nesting keyed streams."""
    payload = f"{int(master_seed)}:{tag}:{int(index)}".encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")
