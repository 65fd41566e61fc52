"""Deterministic RNG streams derived from (root seed, stream name).

Every stochastic consumer in the package (init, masking, dropout, data
order, perturbations) pulls from its own named stream so that adding or
removing one consumer cannot shift the draws seen by another.  The name
is hashed with sha256, which keeps the derivation stable across runs,
platforms and process boundaries; Python's builtin hash() is salted per
process and must not be used here.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(name: str) -> int:
    """Stable 64-bit key for a stream name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the given stream, independent of creation order."""
    entropy = [int(root_seed) & _MASK64, stream_key(name)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    # Redraw only the offending entries; the loop terminates fast since
    # each redraw keeps ~95% of its draws.
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out
