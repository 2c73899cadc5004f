"""Deterministic 64-bit PRNG used for corpus generation and parameter init.

The generator is a splitmix-style 64-bit mixer, pinned here constant by
constant so that a corpus generated from a given seed is reproducible
bit-for-bit by any implementation of the same recipe:

    state   <- (state + 0x9E3779B97F4B7C15) mod 2^64
    z       <- state
    z       <- (z xor (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2^64
    z       <- (z xor (z >> 27)) * 0x94D049BB133111EB   mod 2^64
    output  <- z xor (z >> 31)

Doubles are drawn as ``(output >> 11) * 2**-53`` (uniform on [0, 1)),
integers as ``output mod n`` (the modulo bias is negligible for the small
ranges used here and is part of the pinned recipe), and normals via the
Box-Muller transform consuming exactly two uniforms per pair.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4B7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """Sequential splitmix64 stream; all draws come from one state in order.

    Batch draws advance the same stream the scalar draws do, so any mix of
    the two yields one well-defined sequence.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def _next_batch(self, n: int) -> np.ndarray:
        """The next n outputs as uint64, vectorized (wrapping arithmetic)."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        state = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        self._state = int(state[-1])
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction."""
        if n <= 0:
            raise ValueError(f"randint needs n >= 1, got {n}")
        return self.next_u64() % n

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """n standard normals; Box-Muller, two uniforms per generated pair.

        The cosine output of a pair comes first; an unconsumed sine is kept
        as the spare for the next call.
        """
        out = np.empty(n)
        fill = 0
        if self._spare_normal is not None and n > 0:
            out[0] = self._spare_normal
            self._spare_normal = None
            fill = 1
        remaining = n - fill
        if remaining <= 0:
            return out
        pairs = (remaining + 1) // 2
        u = (self._next_batch(2 * pairs) >> np.uint64(11)) * 2.0**-53
        # u1 = 0 would send log to -inf; nudge to the smallest positive draw
        u1 = np.maximum(u[0::2], 2.0**-53)
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        draws = np.empty(2 * pairs)
        draws[0::2] = r * np.cos(angle)
        draws[1::2] = r * np.sin(angle)
        out[fill:] = draws[:remaining]
        if remaining < 2 * pairs:
            self._spare_normal = float(draws[remaining])
        return out

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
