"""Root-seed fanout: every random stream derives from (root seed, stream name)."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_entropy(root_seed: int, name: str) -> list[int]:
    h = hashlib.sha256(name.encode("utf-8")).digest()
    return [int(root_seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(h[:8], "little")]


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Named generator; deterministic across machines for a given root seed."""
    return np.random.default_rng(np.random.SeedSequence(stream_entropy(root_seed, name)))


def indexed_rng(seed: int, index: int) -> np.random.Generator:
    """Per-index counter generator so parallel loops stay order-independent."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)]))
