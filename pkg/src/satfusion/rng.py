"""Deterministic random number generation for reproducible datasets.

Synthetic corpora and dataset splits must regenerate byte-identically from a
recorded seed, on any platform and in any language someone may port this
pipeline to.  That rules out platform default RNGs, so this module carries a
self-contained PCG32 generator (O'Neill's permuted congruential generator,
XSH-RR output function, 64-bit LCG state, 32-bit output).  The algorithm
identifier below is recorded in every dataset manifest.

Reference constants: multiplier 6364136223846793005, fixed stream increment
1442695040888963407 (the generator's default stream).
"""

from __future__ import annotations

ALGORITHM_ID = "pcg32-xsh-rr-64/32"

_MASK64 = 0xFFFF_FFFF_FFFF_FFFF
_MULT = 6364136223846793005
_INC = 1442695040888963407


class Pcg32:
    """PCG32 stream seeded from a single 64-bit integer.

    The seeding procedure matches the reference ``pcg32_srandom_r`` with the
    default stream: advance once, add the seed, advance again.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.state = 0
        self.next_u32()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        """Next raw 32-bit output."""
        old = self.state
        self.state = (old * _MULT + _INC) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFF_FFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFF_FFFF

    def random(self) -> float:
        """Float in [0, 1) with 32 bits of resolution."""
        return self.next_u32() / 4294967296.0

    def uniform(self, lo: float, hi: float) -> float:
        """Float in [lo, hi)."""
        return lo + (hi - lo) * self.random()

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection on the raw 32-bit stream."""
        if n <= 0:
            raise ValueError("n must be positive")
        if n > 0x1_0000_0000:
            raise ValueError("range exceeds 32-bit output")
        threshold = (0x1_0000_0000 - n) % n
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % n

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError("hi must be >= lo")
        return lo + self.randrange(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle, high index first."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def uniform_block(self, n: int, lo: float = 0.0, hi: float = 1.0) -> list[float]:
        """n floats in [lo, hi); one tight loop to keep generation cheap."""
        state = self.state
        out = []
        span = hi - lo
        append = out.append
        for _ in range(n):
            old = state
            state = (old * _MULT + _INC) & _MASK64
            xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFF_FFFF
            rot = old >> 59
            val = ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFF_FFFF
            append(lo + span * (val / 4294967296.0))
        self.state = state
        return out
