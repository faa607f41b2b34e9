"""Deterministic random streams.

All randomness flows through counter-based Philox generators keyed by
structured tuples (seed, epoch), (seed, query, permutation index), etc., so
any consumer can be re-run in isolation and results never depend on call
order, platform, or thread count. String key parts are hashed with blake2b,
never with Python's salted hash().
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (bool,)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported RNG key part: {part!r}")


def generator(*key_parts) -> np.random.Generator:
    """Philox generator for the stream named by `key_parts`."""
    entropy = [_key_part(p) for p in key_parts]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def truncated_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until within 2 std (true truncation, not a clip).

    Values are quantized to float32 before the final cast so float64
    verification builds see bit-identical parameter values.
    """
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32).astype(dtype)
