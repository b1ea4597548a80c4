"""Counter-based random numbers.

Every random quantity in the package is a pure function of a 64-bit key and
an integer counter, so results never depend on thread scheduling or on the
order in which paths or lattice cells are visited.  Keys are derived by
hashing (parent key, index, purpose tag) with the splitmix64 finalizer.
"""
import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# purpose tags
TAG_ENV = 1
TAG_PATH = 2
TAG_OFFSET = 3
TAG_CELL = 4
TAG_PERM = 5
TAG_REPLICATE = 6
TAG_REMARK = 7

MASK64 = (1 << 64) - 1


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def combine(key, value):
    """Hash a signed integer into a key."""
    v = np.uint64(np.int64(value) & np.int64(0x7FFFFFFFFFFFFFFF))
    if value < 0:
        v = v ^ np.uint64(0x8000000000000000)
    return mix64(key ^ mix64(v + GOLDEN))


@njit(cache=True, nogil=True)
def derive(key, index, tag):
    return combine(combine(key, index), tag)


@njit(cache=True, nogil=True)
def uniform(key, counter):
    """Uniform on [0, 1) at position ``counter`` of the stream ``key``."""
    z = mix64(key + np.uint64(counter + 1) * GOLDEN)
    return float(z >> _S11) * _INV53


@njit(cache=True, nogil=True)
def normal_pair(key, counter):
    """Two independent standard normals from uniforms ``2c`` and ``2c+1``."""
    u1 = 1.0 - uniform(key, 2 * counter)
    u2 = uniform(key, 2 * counter + 1)
    r = np.sqrt(-2.0 * np.log(u1))
    t = 2.0 * np.pi * u2
    return r * np.cos(t), r * np.sin(t)


@njit(cache=True, nogil=True)
def polar_pair(key, counter):
    """Marsaglia polar method; returns two normals and the next free counter."""
    while True:
        u = 2.0 * uniform(key, counter) - 1.0
        v = 2.0 * uniform(key, counter + 1) - 1.0
        counter += 2
        s = u * u + v * v
        if 0.0 < s < 1.0:
            f = np.sqrt(-2.0 * np.log(s) / s)
            return u * f, v * f, counter


@njit(cache=True, nogil=True)
def derive_many(key, start, count, tag):
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = derive(key, start + i, tag)
    return out


def as_key(seed):
    """Map any Python int (possibly negative or > 64 bits) to a uint64 key."""
    return np.uint64(int(seed) & MASK64)


def child_seed(seed, index, tag):
    return int(derive(as_key(seed), int(index), int(tag)))


def uniforms(seed, count, start=0):
    key = as_key(seed)
    return np.array([uniform(key, start + i) for i in range(count)])


class StreamRNG:
    """Small sequential view over a counter-based stream (for Python-side use)."""

    def __init__(self, seed):
        self.key = as_key(seed)
        self.counter = 0

    def random(self, size=None):
        if size is None:
            u = uniform(self.key, self.counter)
            self.counter += 1
            return u
        out = np.empty(int(np.prod(size)))
        for i in range(out.size):
            out[i] = uniform(self.key, self.counter)
            self.counter += 1
        return out.reshape(size)

    def generator(self):
        """A numpy Generator seeded from this stream (for vectorized utility work)."""
        z = (int(self.key) + (self.counter + 1) * int(GOLDEN)) & MASK64
        seed = int(mix64(np.uint64(z)))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(seed))
