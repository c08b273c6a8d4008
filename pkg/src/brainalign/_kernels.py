"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a ``*_nb`` version jitted with ``@njit`` and a
``*_np`` version written against plain numpy.  The public name is bound to
one of them at import time.  Set ``BRAINALIGN_NUMBA=0`` to force the numpy
path (useful for debugging or when numba is not installed).  Both paths
return identical results; tests/test_kernels.py checks that.
"""

from __future__ import annotations

import os

import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)

_WANT_NUMBA = os.environ.get("BRAINALIGN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = _WANT_NUMBA and HAVE_NUMBA


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def fnv1a64_np(data: np.ndarray) -> int:
    # sequential by nature; plain ints beat numpy scalars by ~10x here
    h, prime = int(FNV_OFFSET), int(FNV_PRIME)
    for b in data.tobytes():
        h = ((h ^ b) * prime) & _MASK64
    return h


def lcs_length_np(a: np.ndarray, b: np.ndarray) -> int:
    if a.size == 0 or b.size == 0:
        return 0
    # row-by-row DP; the inner recurrence is vectorised via a running max
    prev = np.zeros(b.size + 1, dtype=np.int64)
    for x in a:
        match = (b == x)
        diag = prev[:-1] + 1
        cur = np.zeros_like(prev)
        cand = np.where(match, diag, prev[1:])
        # cur[j+1] = max(cand[j], cur[j]) -> prefix maximum
        cur[1:] = np.maximum.accumulate(cand)
        prev = cur
    return int(prev[-1])


def paired_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(a[:, 0], b[:, 0])
    iy1 = np.maximum(a[:, 1], b[:, 1])
    ix2 = np.minimum(a[:, 2], b[:, 2])
    iy2 = np.minimum(a[:, 3], b[:, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter)


def pool_top1_hits_np(sim: np.ndarray, probes: np.ndarray, pools: np.ndarray) -> int:
    """Count probes whose paired column beats every other column in its pool.

    ``sim[i, j]`` scores query i against candidate j; probe i's pair is
    candidate i.  ``pools[r]`` lists the distractor candidates for
    ``probes[r]``.  Ties count as misses.
    """
    if probes.size == 0:
        return 0
    own = sim[probes, probes]
    others = sim[probes[:, None], pools]
    if others.shape[1] == 0:
        return int(probes.size)
    return int(np.count_nonzero(own > others.max(axis=1)))


# --------------------------------------------------------------------------
# numba versions
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def fnv1a64_nb(data):
        h = np.uint64(0xCBF29CE484222325)
        prime = np.uint64(0x100000001B3)
        for i in range(data.shape[0]):
            h = (h ^ np.uint64(data[i])) * prime
        return h

    @njit(cache=True)
    def lcs_length_nb(a, b):
        n = a.shape[0]
        m = b.shape[0]
        if n == 0 or m == 0:
            return 0
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            prev, cur = cur, prev
        return prev[m]

    @njit(cache=True)
    def paired_iou_nb(a, b):
        n = a.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            ix1 = max(a[i, 0], b[i, 0])
            iy1 = max(a[i, 1], b[i, 1])
            ix2 = min(a[i, 2], b[i, 2])
            iy2 = min(a[i, 3], b[i, 3])
            w = ix2 - ix1
            h = iy2 - iy1
            inter = 0.0
            if w > 0.0 and h > 0.0:
                inter = w * h
            area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
            area_b = (b[i, 2] - b[i, 0]) * (b[i, 3] - b[i, 1])
            out[i] = inter / (area_a + area_b - inter)
        return out

    @njit(cache=True)
    def pool_top1_hits_nb(sim, probes, pools):
        hits = 0
        for r in range(probes.shape[0]):
            p = probes[r]
            own = sim[p, p]
            ok = True
            for c in range(pools.shape[1]):
                if sim[p, pools[r, c]] >= own:
                    ok = False
                    break
            if ok:
                hits += 1
        return hits


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def _as_bytes(data) -> np.ndarray:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return np.frombuffer(data, dtype=np.uint8)
    arr = np.ascontiguousarray(data)
    return arr.view(np.uint8).reshape(-1)


def fnv1a64(data) -> int:
    """64-bit FNV-1a of a byte buffer or the raw bytes of an array."""
    buf = _as_bytes(data)
    if USE_NUMBA:
        return int(fnv1a64_nb(buf))
    return int(fnv1a64_np(buf))


def lcs_length(a, b) -> int:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if USE_NUMBA:
        return int(lcs_length_nb(a, b))
    return lcs_length_np(a, b)


def paired_iou(a, b) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    if USE_NUMBA:
        return paired_iou_nb(a, b)
    return paired_iou_np(a, b)


def pool_top1_hits(sim, probes, pools) -> int:
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    probes = np.ascontiguousarray(probes, dtype=np.int64)
    pools = np.ascontiguousarray(pools, dtype=np.int64).reshape(probes.shape[0], -1)
    if USE_NUMBA:
        return int(pool_top1_hits_nb(sim, probes, pools))
    return pool_top1_hits_np(sim, probes, pools)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
