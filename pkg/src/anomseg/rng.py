"""Deterministic random numbers for the whole toolkit.

Everything random flows from splitmix64 so that runs are bit-reproducible
across platforms and backends.  Uniform floats take the top 53 bits of a
raw output; normals come from Box-Muller on those floats.
"""

import math

import numpy as np

from .kernels import splitmix64_fill

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_INV53 = 2.0 ** -53


def splitmix64(state):
    """One step of the splitmix64 recurrence: (state, value)."""
    state = (state + GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(*parts):
    """Fold integers / strings into one 64-bit seed, order-sensitive."""
    state = 0x8E3C5A1779B97F4A
    for part in parts:
        if isinstance(part, str):
            chunks = part.encode("utf-8")
            ints = [
                int.from_bytes(chunks[i : i + 8], "little")
                for i in range(0, len(chunks), 8)
            ] or [0]
        else:
            ints = [int(part) & MASK64]
        for c in ints:
            state, value = splitmix64(state ^ c)
            state ^= value
    return state & MASK64


class SplitMix64:
    """Sequential generator over the splitmix64 stream."""

    def __init__(self, seed):
        self._state = int(seed) & MASK64

    def next_u64(self):
        self._state, value = splitmix64(self._state)
        return value

    def fill_u64(self, n):
        out = splitmix64_fill(self._state, n)
        self._state = (self._state + n * GAMMA) & MASK64
        return out

    def uniform(self):
        return (self.next_u64() >> 11) * _INV53

    def uniforms(self, n):
        return (self.fill_u64(n) >> np.uint64(11)).astype(np.float64) * _INV53

    def normals(self, n):
        """n standard normals via Box-Muller (consumes 2*ceil(n/2) uniforms)."""
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        return out[:n]

    def randint(self, n):
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle of a list or 1-D array."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, *tags):
        """Derive an independent child generator, tagged for reproducibility."""
        return SplitMix64(derive_seed(self._state, *tags))
