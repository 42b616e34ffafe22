"""Counter-based random streams (Philox4x32-10).

Every draw is a pure function of ``(seed, stream index, sample id, draw
index)``, so Monte-Carlo batches can be split across any number of workers
without changing a single bit of the result.

Counter layout for one Philox block::

    word 0: draw block (two doubles per block)
    word 1: sample id
    word 2: stream index, low 32 bits
    word 3: stream index, high 32 bits

The 64-bit seed is the Philox key.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numba as nb
import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)
_TWO_NEG53 = 2.0**-53
_TWO_PI = 2.0 * np.pi

U64_MAX = 2**64 - 1


@nb.njit(cache=True, nogil=True)
def _philox4x32(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _SHIFT32
        lo0 = p0 & _MASK32
        hi1 = p1 >> _SHIFT32
        lo1 = p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


@nb.njit(cache=True, nogil=True)
def _to_unit(hi, lo):
    # 53 high bits of a 64-bit word -> [0, 1)
    return float(((hi << _SHIFT32) | lo) >> _SHIFT11) * _TWO_NEG53


@nb.njit(cache=True, nogil=True)
def _fill(key0, key1, s_lo, s_hi, samples, start, count, normal, out):
    for r in range(samples.shape[0]):
        sid = np.uint64(samples[r])
        j = start
        stop = start + count
        while j < stop:
            block = j >> 1
            x0, x1, x2, x3 = _philox4x32(np.uint64(block), sid, s_lo, s_hi, key0, key1)
            u0 = _to_unit(x0, x1)
            u1 = _to_unit(x2, x3)
            if normal:
                rad = np.sqrt(-2.0 * np.log(1.0 - u0))
                v0 = rad * np.cos(_TWO_PI * u1)
                v1 = rad * np.sin(_TWO_PI * u1)
            else:
                v0 = u0
                v1 = u1
            if (j & 1) == 0:
                out[r, j - start] = v0
                if j + 1 < stop:
                    out[r, j + 1 - start] = v1
                j += 2
            else:
                out[r, j - start] = v1
                j += 1


def philox4x32(counter, key) -> tuple[int, int, int, int]:
    """Raw Philox4x32-10 block for a 4-word counter and 2-word key."""
    c = [np.uint64(int(v) & 0xFFFFFFFF) for v in counter]
    k = [np.uint64(int(v) & 0xFFFFFFFF) for v in key]
    return tuple(int(v) for v in _philox4x32(c[0], c[1], c[2], c[3], k[0], k[1]))


def _sample_ids(samples) -> np.ndarray:
    if np.isscalar(samples):
        return np.arange(int(samples), dtype=np.int64)
    ids = np.asarray(samples, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFFFFFF):
        raise ValueError("sample ids must lie in [0, 2**32)")
    return ids


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    ``(seed, index)`` fully determines every draw. Substreams derive a new
    64-bit index by hashing the parent index together with the given keys.
    """

    seed: int
    index: int = 0

    def __post_init__(self):
        for name in ("seed", "index"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= U64_MAX:
                raise ValueError(f"{name} must be an integer in [0, 2**64), got {v!r}")

    def substream(self, *keys: int | str) -> RngStream:
        h = hashlib.blake2b(digest_size=8, person=b"klc-rng")
        h.update(struct.pack("<Q", int(self.index)))
        for key in keys:
            if isinstance(key, str):
                h.update(b"s" + key.encode())
            else:
                h.update(b"i" + struct.pack("<q", int(key)))
            h.update(b"|")
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))

    def _draw(self, count, samples, start, normal):
        ids = _sample_ids(samples)
        out = np.empty((ids.shape[0], int(count)), dtype=np.float64)
        if count == 0 or ids.shape[0] == 0:
            return out
        if start < 0:
            raise ValueError("start must be non-negative")
        seed, idx = int(self.seed), int(self.index)
        _fill(
            np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32),
            np.uint64(idx & 0xFFFFFFFF), np.uint64(idx >> 32),
            ids, int(start), int(count), normal, out,
        )
        return out

    def uniforms(self, count: int, samples=1, start: int = 0) -> np.ndarray:
        """Uniform draws on [0, 1), shape ``(n_samples, count)``.

        Row ``r`` holds draws ``start .. start+count-1`` of sample id
        ``samples[r]`` (``samples`` may be an int S meaning ids ``0..S-1``).
        """
        return self._draw(count, samples, start, False)

    def normals(self, count: int, samples=1, start: int = 0) -> np.ndarray:
        """Standard-normal draws (Box-Muller on Philox pairs), same layout as `uniforms`."""
        return self._draw(count, samples, start, True)
