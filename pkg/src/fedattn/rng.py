"""Platform-independent pseudo-random numbers.

Algorithm (fixed; golden fixtures depend on it):

* State: four 64-bit words filled by consecutive outputs of splitmix64
  started at the user seed (``x += 0x9E3779B97F4A7C15``, then
  ``z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9``,
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``, ``z ^ (z >> 31)``).
* Generator: xoshiro256** (Blackman & Vigna),
  ``out = rotl(s1 * 5, 7) * 9``.
* Uniform doubles: ``(out >> 11) * 2**-53`` in ``[0, 1)``.
* Normals: Box-Muller on two uniforms ``u1, u2``:
  ``r = sqrt(-2 log(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``. A request for an odd count discards the final sine.
* Bounded integers: rejection sampling, ``out`` accepted when
  ``out < 2**64 - (2**64 mod n)``, returning ``out mod n``.

Sub-streams for independent purposes come from :func:`derive_seed`, which
folds integer keys into the seed through splitmix64.
"""

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1


def _splitmix_py(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def derive_seed(seed, *keys):
    """Mix integer ``keys`` into ``seed``; deterministic and order-sensitive."""
    x = int(seed) & _MASK
    _, out = _splitmix_py(x)
    for k in keys:
        _, out = _splitmix_py((out ^ (int(k) & _MASK)) & _MASK)
    return out


@njit(cache=True, nogil=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True, nogil=True)
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True, nogil=True)
def _uniform(s, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = float(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return out


@njit(cache=True, nogil=True)
def _normal(s, n):
    out = np.empty(n)
    i = 0
    while i < n:
        u1 = float(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        u2 = float(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        out[i] = r * np.cos(2.0 * np.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * np.sin(2.0 * np.pi * u2)
        i += 2
    return out


@njit(cache=True, nogil=True)
def _below(s, bound, n):
    out = np.empty(n, dtype=np.int64)
    b = np.uint64(bound)
    # 2**64 mod b, computed in wrapping uint64 arithmetic
    rem = (np.uint64(0) - b) % b
    limit = np.uint64(0) - rem
    for i in range(n):
        while True:
            x = _next(s)
            if rem == np.uint64(0) or x < limit:
                out[i] = np.int64(x % b)
                break
    return out


class Xoshiro256:
    """xoshiro256** generator seeded through splitmix64."""

    def __init__(self, seed):
        x = int(seed) & _MASK
        words = []
        for _ in range(4):
            x, z = _splitmix_py(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    def next_u64(self):
        return int(_next(self._s))

    def random(self, n):
        """``n`` uniform doubles in ``[0, 1)``."""
        return _uniform(self._s, int(n))

    def normal(self, shape, std=1.0):
        n = int(np.prod(shape, dtype=np.int64))
        return (_normal(self._s, n) * std).reshape(shape)

    def integers(self, bound, n):
        """``n`` integers uniform in ``[0, bound)``."""
        if bound < 1:
            raise ValueError("bound must be >= 1")
        return _below(self._s, int(bound), int(n))

    def sample(self, population, k):
        """Uniform ``k``-subset of ``population`` (partial Fisher-Yates), sorted."""
        pool = list(population)
        if not 0 <= k <= len(pool):
            raise ValueError("k out of range")
        for i in range(k):
            j = i + int(self.integers(len(pool) - i, 1)[0])
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:k])
