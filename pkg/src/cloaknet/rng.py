"""Deterministic, splittable random streams.

Every random draw in the toolchain (secret generation, masks, random test
models) comes from a :class:`Stream`.  A stream is identified by a root seed
plus a path of labels; the path is hashed into a 128-bit Philox4x64-10 key and
the counter starts at zero.  Child streams are independent of the order in
which they are created, so secrets for layer ``conv3`` do not change when a
layer is added in front of it.

Sampling is defined on the raw 64-bit words rather than on numpy's
``Generator`` methods so the byte-level result is pinned by this module:

* ``uniform``: ``(word >> 11) * 2**-53`` scaled into ``[low, high)``
* ``integers(k)``: rejection of words ``>= 2**64 - (2**64 % k)``, then ``% k``
* ``permutation(n)``: Fisher-Yates, ``i`` from ``n-1`` down to ``1``
"""

from __future__ import annotations

import hashlib

import numpy as np

RNG_NAME = "philox4x64-10/sha256-path/v1"

_TWO64 = 1 << 64


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    text = "\x1f".join([str(int(seed))] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class Stream:
    """A named random stream; ``child`` splits off an independent sub-stream."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < _TWO64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        self._bits = np.random.Philox(key=_derive_key(self.seed, self.path))

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={'/'.join(self.path) or '.'})"

    def child(self, *labels) -> "Stream":
        return Stream(self.seed, self.path + tuple(str(label) for label in labels))

    def words(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, low: float, high: float, shape=(), dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        unit = (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * unit
        return out.reshape(shape).astype(dtype)

    def integers(self, k: int, size: int) -> np.ndarray:
        """``size`` integers uniform in ``[0, k)``."""
        if k <= 0:
            raise ValueError("integers() needs a positive bound")
        limit = np.uint64(_TWO64 - (_TWO64 % k)) if _TWO64 % k else None
        out: list[int] = []
        while len(out) < size:
            raw = self.words(size - len(out))
            if limit is not None:
                raw = raw[raw < limit]
            out.extend(int(v) % k for v in raw)
        return np.asarray(out, dtype=np.int64)

    def choice_index(self, k: int) -> int:
        return int(self.integers(k, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.choice_index(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def signs(self, size: int) -> np.ndarray:
        return np.where(self.integers(2, size) == 1, 1.0, -1.0)


def as_stream(rng) -> Stream:
    """Accept a Stream or a bare integer seed."""
    if isinstance(rng, Stream):
        return rng
    return Stream(int(rng))
