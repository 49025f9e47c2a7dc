"""Deterministic random streams.

Every stochastic component draws from a Philox counter-based generator
keyed by a master seed plus string/integer labels, so any stream can be
reproduced in isolation and results are identical across platforms.
The platform-default RNG is never used.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for (seed, labels...)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_int(l) for l in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def multinomial_index(rng: np.random.Generator, weights: np.ndarray) -> int:
    """Draw one index with probability proportional to non-negative weights.

    Inverse-CDF on a single uniform draw; deterministic for a given stream.
    """
    cdf = np.cumsum(weights, dtype=np.float64)
    total = cdf[-1]
    if not total > 0:
        raise ValueError("weights must have positive sum")
    u = rng.random() * total
    return int(np.searchsorted(cdf, u, side="right").clip(0, len(weights) - 1))
