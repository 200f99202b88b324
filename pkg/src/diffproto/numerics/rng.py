"""Seeded, portable random streams.

Everything stochastic in this package flows through :class:`RngStream`, which
wraps the Philox4x64-10 counter-based bit generator. Only ``random_raw`` bits
are consumed from numpy; the uniform/normal/integer transforms are implemented
here so that a given seed produces the same sample sequence on every platform
and numpy release.

Streams are split hierarchically (run seed -> episode seed -> per-draw) via
``child``, which mixes string/integer tags into a fresh Philox key.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"

_INV_2_53 = 2.0 ** -53


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng tag must be int or str, got {type(tag).__name__}")


class RngStream:
    """One independent stream of pseudo-random numbers.

    The seed (plus any derivation tags) fully determines the sequence.
    """

    def __init__(self, seed: int, _tags: tuple = ()):
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        self._tags = tuple(_tags)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF]
        entropy.extend(_tag_to_int(t) for t in self._tags)
        self._bitgen = np.random.Philox(key=np.random.SeedSequence(entropy).generate_state(2, np.uint64))

    def child(self, *tags) -> "RngStream":
        """Derive an independent stream; same (seed, tags) -> same stream."""
        return RngStream(self.seed, self._tags + tags)

    def raw(self, n: int) -> np.ndarray:
        """n raw 64-bit words from the generator."""
        return self._bitgen.random_raw(n)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 samples in [0, 1): top 53 bits of each raw word."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else u[0]

    def standard_normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normals via Box-Muller on the uniform stream.

        Each output pair consumes two uniforms: r = sqrt(-2 ln u1),
        z = (r cos(2 pi u2), r sin(2 pi u2)). u1 is shifted into (0, 1]
        so the log never sees zero.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        u1 = (self.raw(pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * _INV_2_53  # (0, 1]
        u2 = (self.raw(pairs) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n].astype(dtype, copy=False)
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high); scaled-uniform construction."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        u = self.uniform(size if size is not None else ())
        v = np.minimum(np.floor(u * span).astype(np.int64), span - 1) + low
        return v if size is not None else int(v)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n): stable argsort of n uniform keys."""
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]
