"""Seeded, splittable random streams (Philox counter-based bit generator)."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``seed`` and a path of labels.

    Labels may be ints or strings; the same ``(seed, labels)`` always yields
    the same sequence, and different label paths give independent streams.
    """
    key = [int(seed)]
    for lab in labels:
        key.append(zlib.crc32(lab.encode()) if isinstance(lab, str) else int(lab))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def as_generator(seed, *labels) -> np.random.Generator:
    """Pass a ``Generator`` through unchanged; otherwise derive :func:`stream`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(seed, *labels)
