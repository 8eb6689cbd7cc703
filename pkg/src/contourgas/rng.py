"""Counter-based random numbers.

Every random quantity in the package is a pure function of a 64-bit seed and
an integer key tuple, hashed with the splitmix64 finalizer.  Query order
never matters, which is what lets backward exploration and forward
simulation agree on a single realization.
"""
from __future__ import annotations

import math
from bisect import bisect_left

MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV53 = 1.0 / (1 << 53)

# stream tags
CELL = 1
POINT = 2
INIT = 3
REPLICA = 4
BRANCH = 5
AUX = 6


def mix(z: int) -> int:
    z = (z + _GOLDEN) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def hash_key(seed: int, *keys: int) -> int:
    h = mix(seed & MASK)
    for k in keys:
        h = mix(h ^ (k & MASK))
    return h


def to_uniform(h: int) -> float:
    """Map 64 bits to a float in the open interval (0, 1)."""
    return ((h >> 11) + 0.5) * _INV53


def uniforms(h: int, n: int) -> list[float]:
    return [to_uniform(mix(h + j)) for j in range(n)]


def replica_seed(master: int, index: int, tag: int = REPLICA) -> int:
    return hash_key(master, tag, index)


class PoissonTable:
    """Inverse-CDF Poisson sampling from a single uniform."""

    __slots__ = ("mean", "cdf")

    def __init__(self, mean: float):
        if mean < 0:
            raise ValueError("negative Poisson mean")
        self.mean = mean
        # log-space terms so large means do not underflow exp(-mean)
        cdf = []
        acc = 0.0
        k = 0
        log_mean = math.log(mean) if mean > 0 else 0.0
        stop = mean + 40 * math.sqrt(mean + 1) + 50
        while True:
            if mean > 0:
                acc += math.exp(-mean + k * log_mean - math.lgamma(k + 1))
            else:
                acc = 1.0
            cdf.append(acc)
            k += 1
            if (acc >= 1.0 - 1e-16 and k > mean) or k > stop:
                break
        self.cdf = cdf

    def sample(self, u: float) -> int:
        k = bisect_left(self.cdf, u)
        if k < len(self.cdf):
            return k
        # beyond the tabulated mass: continue the recursion
        acc = self.cdf[-1]
        k = len(self.cdf) - 1
        p = math.exp(-self.mean + k * math.log(self.mean) - math.lgamma(k + 1)) if self.mean > 0 else 0.0
        while acc < u and p > 0:
            k += 1
            p *= self.mean / k
            acc += p
        return k


class Stream:
    """Sequential uniforms drawn from a counter-based key (for simulations
    whose structure is itself random, e.g. branching trees)."""

    __slots__ = ("_h", "_i")

    def __init__(self, seed: int, *keys: int):
        self._h = hash_key(seed, *keys)
        self._i = 0

    def uniform(self) -> float:
        self._i += 1
        return to_uniform(mix(self._h + self._i))

    def exponential(self) -> float:
        return -math.log(self.uniform())

    def poisson(self, mean: float) -> int:
        if mean <= 0:
            return 0
        if mean < 30:
            u = self.uniform()
            p = math.exp(-mean)
            acc = p
            k = 0
            while u > acc:
                k += 1
                p *= mean / k
                acc += p
                if p == 0.0:
                    break
            return k
        return PoissonTable(mean).sample(self.uniform())
