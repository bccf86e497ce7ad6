"""xorshift64* stream used for batch shuffling.

The generator is versioned so that shuffles can be reproduced outside Python:
state is seeded with ``splitmix64(seed)`` (0 is replaced by a fixed constant),
each draw applies ``x ^= x >> 12; x ^= x << 25; x ^= x >> 27`` and outputs
``x * 0x2545F4914F6CDD1D mod 2**64``. Bounded integers use the upper 32 bits
with multiply-shift reduction.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
XORSHIFT_VERSION = "xorshift64star-v1"


def splitmix64(seed: int) -> int:
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    version = XORSHIFT_VERSION

    def __init__(self, seed: int):
        state = splitmix64(seed & MASK64)
        self.state = state or 0x853C49E6748FEA9B

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def below(self, n: int) -> int:
        """Integer in [0, n) for n < 2**32."""
        return ((self.next_u64() >> 32) * n) >> 32

    def permutation(self, n: int) -> list[int]:
        # Fisher-Yates, walking from the top
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order


def epoch_seed(seed: int, epoch: int) -> int:
    return splitmix64((seed & MASK64) ^ ((epoch + 1) * 0xD1B54A32D192ED03 & MASK64))
