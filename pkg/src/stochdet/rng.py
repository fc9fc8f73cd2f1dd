"""Deterministic, splittable random streams.

Every stochastic draw in this package is a pure function of a base seed
plus a path of labels (pass index, layer index, filter index, ...).
Streams are backed by the counter-based Philox generator, keyed through
``numpy.random.SeedSequence`` spawn keys, so independent substreams can
be opened in any order -- including concurrently -- and always produce
the same values.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _label_to_u32_pair(label: int | str) -> tuple[int, int]:
    """Map a path label to two uint32 words for a SeedSequence spawn key.

    Python's builtin hash() is salted per process, so strings go through
    blake2b for cross-run stability.
    """
    if isinstance(label, (int, np.integer)):
        v = int(label) & _MASK64
    elif isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        v = int.from_bytes(digest, "little")
    else:
        raise TypeError(f"stream path labels must be int or str, got {type(label)!r}")
    return (v >> 32) & 0xFFFFFFFF, v & 0xFFFFFFFF


def _seed_sequence(base_seed: int, path: tuple[int | str, ...]) -> np.random.SeedSequence:
    key: list[int] = []
    for label in path:
        key.extend(_label_to_u32_pair(label))
    return np.random.SeedSequence(entropy=int(base_seed) & _MASK64, spawn_key=tuple(key))


def substream(base_seed: int, *path: int | str) -> np.random.Generator:
    """A Generator whose output depends only on (base_seed, path)."""
    return np.random.Generator(np.random.Philox(_seed_sequence(base_seed, path)))


def derive_seed(base_seed: int, *path: int | str) -> int:
    """A 64-bit seed derived deterministically from (base_seed, path).

    Used to hand independent sub-seeds to components that key their own
    substreams (e.g. one seed per noisy inference pass).
    """
    state = _seed_sequence(base_seed, path).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])
