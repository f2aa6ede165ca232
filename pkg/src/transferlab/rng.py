"""Deterministic, label-derived random streams.

Every consumer of randomness derives its own stream from ``(master_seed,
label)``.  The key is the first 128 bits of sha256 over both, feeding a
counter-based Philox generator, so a stream's draws depend only on the pair,
never on process layout, thread scheduling, or the order streams are created.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RngStream:
    master_seed: int
    label: str
    gen: np.random.Generator = field(repr=False)


def rng_derive(master_seed: int, label: str) -> RngStream:
    """Create the stream for ``label``; same pair -> same stream, always."""
    if not isinstance(master_seed, int) or isinstance(master_seed, bool):
        raise ValueError("master_seed must be an int")
    if not label:
        raise ValueError("label must be a non-empty string")
    digest = hashlib.sha256(
        f"{master_seed}\x1f{label}".encode("utf-8")
    ).digest()
    key = int.from_bytes(digest[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return RngStream(master_seed=master_seed, label=label, gen=gen)


def rng_child(stream: RngStream, suffix: str) -> RngStream:
    """Derive a sub-stream; equivalent to rng_derive with a joined label."""
    return rng_derive(stream.master_seed, f"{stream.label}/{suffix}")


def rng_normal(stream, mean, std, shape, dtype=np.float32) -> np.ndarray:
    """Gaussian draws; std == 0 returns the mean exactly (no degenerate draw)."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(shape, mean, dtype=dtype)
    return stream.gen.normal(mean, std, size=shape).astype(dtype)


def rng_truncated_normal(stream, mean, std, shape, dtype=np.float32, bound=2.0) -> np.ndarray:
    """Gaussian truncated to mean +- bound*std by redrawing out-of-range values."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(shape, mean, dtype=dtype)
    out = stream.gen.normal(mean, std, size=shape)
    lo, hi = mean - bound * std, mean + bound * std
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = stream.gen.normal(mean, std, size=int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out.astype(dtype)


def rng_uniform(stream, low, high, shape, dtype=np.float32) -> np.ndarray:
    if not high >= low:
        raise ValueError(f"need high >= low, got [{low}, {high})")
    return stream.gen.uniform(low, high, size=shape).astype(dtype)


def rng_integers(stream, low, high, shape=None) -> np.ndarray:
    """Integers in [low, high), matching numpy's half-open convention."""
    if not high > low:
        raise ValueError(f"empty integer range [{low}, {high})")
    return stream.gen.integers(low, high, size=shape)


def rng_permutation(stream, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    return stream.gen.permutation(n)
