"""Labeled, counter-based random streams.

Every stochastic site draws from its own Philox stream keyed by the master
seed plus a tuple of labels, e.g. ``stream(seed, "shuffle", round, client)``.
Streams never share state, so the order in which sites are visited (or the
thread that visits them) cannot change any draw.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_word(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        return int(label)
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``."""
    words = [_label_word(lab) for lab in labels]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed for APIs that take plain ints."""
    words = [_label_word(lab) for lab in labels]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & ((1 << 63) - 1)
