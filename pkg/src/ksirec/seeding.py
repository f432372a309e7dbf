"""Derive independent, reproducible generators from one root seed and a fixed label."""

from __future__ import annotations

import zlib

import numpy as np

LABELS = ("data-split", "init", "bpr-sampler", "ssi-pool")


def derive_seed_sequence(seed: int, label: str, *extra: int) -> np.random.SeedSequence:
    # crc32 is stable across processes and platforms, unlike hash()
    key = (zlib.crc32(label.encode("utf-8")),) + tuple(int(x) for x in extra)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def derive_rng(seed: int, label: str, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, label, *extra)))
