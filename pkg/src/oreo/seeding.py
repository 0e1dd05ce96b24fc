"""Root-seed derivation: every component draws from its own named stream."""

from __future__ import annotations

import zlib

import numpy as np


def stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for ``seed`` and a path of component names / indices.

    String names are hashed with CRC32 so the mapping is stable across runs
    and interpreters.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream_id(n) for n in names)))
