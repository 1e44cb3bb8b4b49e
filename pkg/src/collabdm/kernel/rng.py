"""Counter-based random streams.

The generator is SplitMix64 (Steele, Lea & Flood, 2014): the value at
position ``c`` of the stream keyed by ``key`` is the finalizer ``mix64``
applied to ``key + (c + 1) * 0x9E3779B97F4A7C15`` (mod 2**64), i.e. the
``c``-th output of a SplitMix64 generator seeded with ``key``. Everything
else is derived from those 64-bit words:

* uniform doubles use the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1);
* Gaussians use Box-Muller on consecutive word pairs ``(u1, u2)`` with
  ``u1`` replaced by ``1 - u1``; a pair yields the cosine and then the sine
  variate, so ``normal(n)`` consumes ``2 * ceil(n / 2)`` positions and is a
  prefix of ``normal(m)`` for ``m > n``;
* integers below ``n`` are ``floor(u * n)`` with one position per draw;
* ``substream(tag)`` re-keys with ``mix64(A + (tag + 1) * golden)`` where
  ``A = mix64(key ^ SALT)``. For a fixed key this is injective in the tag.
  String tags are mapped through CRC-32.

A stream is a small value: (key, counter). Drawing advances the counter of
that object only; use ``substream`` or ``copy`` to hand independent streams
to concurrent workers.
"""
from __future__ import annotations

import math
import zlib

import numpy as np

from ._backend import impl

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
SALT = 0xD1B54A32D192ED03


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def tag_value(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    tag = int(tag)
    if not 0 <= tag < 1 << 32:
        raise ValueError(f"integer stream tags must lie in [0, 2**32), got {tag}")
    return tag


class RngStream:
    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(key={self.key:#018x}, counter={self.counter})"

    def __eq__(self, other):
        return (isinstance(other, RngStream) and self.key == other.key
                and self.counter == other.counter)

    def __hash__(self):
        return hash((self.key, self.counter))

    def copy(self) -> RngStream:
        return RngStream(self.key, self.counter)

    def substream(self, *tags) -> RngStream:
        """Independent stream for ``tags``, starting at counter 0.

        The parent's counter is not consulted or advanced.
        """
        key = self.key
        for tag in tags:
            base = mix64(key ^ SALT)
            key = mix64(base + (tag_value(tag) + 1) * GOLDEN)
        return RngStream(key)

    # raw draws

    def bits(self, n: int) -> np.ndarray:
        out = impl.splitmix_fill(self.key, self.counter & MASK64, int(n))
        self.counter += int(n)
        return out

    def next_u64(self) -> int:
        return int(self.bits(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        return (self.bits(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        n = int(n)
        bits = self.bits(2 * ((n + 1) // 2))
        return impl.box_muller(bits, n)

    def randbelow(self, n: int, size: int | None = None):
        """Integers in ``[0, n)``; ``n`` may be an array matching ``size``."""
        if size is None:
            return int(self.random() * n)
        return np.floor(self.uniform(size) * n).astype(np.int64)

    # derived distributions

    def sample(self, n: int, m: int) -> np.ndarray:
        """First ``m`` entries of a forward Fisher-Yates shuffle of ``range(n)``.

        Step ``i`` swaps position ``i`` with ``i + floor(u_i * (n - i))``.
        Consumes exactly ``m`` positions.
        """
        if not 0 <= m <= n:
            raise ValueError(f"cannot take {m} items from {n}")
        arr = np.arange(n, dtype=np.int64)
        if m == 0:
            return arr[:0]
        offs = self.randbelow(n - np.arange(m), size=m)
        for i in range(m):
            j = i + offs[i]
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:m].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.sample(n, n)

    def gamma(self, shape: float) -> float:
        """Marsaglia-Tsang Gamma(shape, 1).

        For ``shape < 1`` draws Gamma(shape + 1) then multiplies by
        ``u ** (1 / shape)``. Each Gaussian inside the rejection loop
        consumes one Box-Muller pair (the sine variate is discarded).
        """
        if shape <= 0:
            raise ValueError("gamma shape must be positive")
        if shape < 1.0:
            g = self.gamma(shape + 1.0)
            return g * self.random() ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = float(self.normal(1)[0])
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.random()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def dirichlet(self, concentration: float, k: int) -> np.ndarray:
        g = np.array([self.gamma(concentration) for _ in range(k)])
        total = g.sum()
        if total <= 0.0:
            # all draws underflowed (tiny concentration): put the mass on the largest
            out = np.zeros(k)
            out[int(np.argmax(g))] = 1.0
            return out
        return g / total
