"""Deterministic 64-bit counter-based random generator (SplitMix64).

Every stochastic step in the package draws from this generator so that
identical seeds give identical streams on every platform and in every
implementation of the same algorithm. The stream is specified by
algorithm, not by library:

  state_{k+1} = (state_k + 0x9E3779B97F4A7C15) mod 2^64
  output(z)   : z ^= z >> 30; z *= 0xBF58476D1CE4E5B9 (mod 2^64)
                z ^= z >> 27; z *= 0x94D049BB133111EB (mod 2^64)
                z ^= z >> 31

Uniform doubles take the top 53 bits: u = (x >> 11) * 2^-53, u in [0, 1).
Normals use the Box-Muller transform on two consecutive uniforms with
u1 mapped into (0, 1] as ((x >> 11) + 1) * 2^-53.

Sub-streams are derived by hashing a text label into the seed with
FNV-1a (64-bit) and one SplitMix64 output step, so independent pipeline
tasks never share a stream.
"""

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z &= _MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z


def _fnv1a(label: str) -> int:
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h


def derive_seed(master_seed: int, label: str) -> int:
    """Derive an independent sub-stream seed from a master seed and a task label."""
    return _mix((master_seed & _MASK) ^ _fnv1a(label))


class SplitMix64:
    """Counter-based PRNG; pure function of (seed, draw index)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_uint64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_uint64() >> 11) * 2.0**-53

    def uniform_open(self) -> float:
        """Uniform double in (0, 1]; safe as a log argument."""
        return ((self.next_uint64() >> 11) + 1) * 2.0**-53

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        """Standard Box-Muller normal (cosine branch only, one pair per draw).

        Evaluated with numpy scalar ufuncs so the stream is bit-identical
        to the vectorized normal_array path.
        """
        u1 = self.uniform_open()
        u2 = self.uniform()
        z = np.sqrt(-2.0 * np.log(np.float64(u1))) \
            * np.cos(np.float64(2.0 * np.pi * u2))
        return float(mean + sd * z)

    def normals(self, n: int, mean: float = 0.0, sd: float = 1.0) -> list[float]:
        return [self.normal(mean, sd) for _ in range(n)]

    def below(self, p: float) -> bool:
        """Bernoulli draw: True with probability p."""
        return self.uniform() < p

    def randint(self, n: int) -> int:
        """Integer in [0, n) via the top-53-bit uniform; n must fit in 53 bits."""
        return int(self.uniform() * n)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def uniform_array(seed: int, n: int) -> np.ndarray:
    """The first n uniforms of SplitMix64(seed), computed counter-style.

    Bit-identical to n successive SplitMix64.uniform() calls.
    """
    counters = (np.uint64(seed & _MASK)
                + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA))
    with np.errstate(over="ignore"):
        bits = _mix_array(counters)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normal_array(seed: int, n: int) -> np.ndarray:
    """The first n normals of SplitMix64(seed) (Box-Muller, two draws each).

    Bit-identical to n successive SplitMix64.normal() calls.
    """
    counters = (np.uint64(seed & _MASK)
                + np.arange(1, 2 * n + 1, dtype=np.uint64) * np.uint64(_GAMMA))
    with np.errstate(over="ignore"):
        bits = _mix_array(counters)
    top = (bits >> np.uint64(11)).astype(np.float64)
    u1 = (top[0::2] + 1.0) * 2.0**-53
    u2 = top[1::2] * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
