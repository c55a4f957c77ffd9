"""
Seed expansion.
A splitmix64 stream turns one master seed into independent component seeds.
"""

from typing import List

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    z = state & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def expand_seed(seed: int, count: int) -> List[int]:
    """First `count` outputs of the splitmix64 stream seeded with `seed`, as 63-bit ints."""
    state = int(seed) & MASK64
    out = []
    for _ in range(count):
        state = (state + GOLDEN_GAMMA) & MASK64
        out.append(splitmix64(state) >> 1)
    return out
