"""Keyed random substreams.

Every random draw in a run comes from a stream derived from the run seed and
a stable text label such as ``"run:17/node:3"``. The derivation is pinned:

    words = BLAKE2b-128(label, utf-8) read as four little-endian uint32
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *words]
    stream  = numpy Generator(PCG64(SeedSequence(entropy)))

Because streams are keyed by label rather than drawn in sequence from one
generator, reordering or parallelising runs never changes any run's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_substream(seed: int, label: str) -> np.random.Generator:
    seed = int(seed) & SEED_MASK
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_label_words(label)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def node_streams(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``count`` independent per-node streams."""
    root = np.random.SeedSequence(rng.integers(0, 2**63, size=4).tolist())
    return [np.random.Generator(np.random.PCG64(s)) for s in root.spawn(count)]
