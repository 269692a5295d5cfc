"""Loop kernels compiled with numba.

Same contracts as :mod:`bitkv.kernels._numpy`.  Each compressed tile is
expanded into a 64-element scratch buffer and then consumed with dense
arithmetic, which is the load-as-compressed, compute-as-dense pattern.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True)
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit(cache=True)
def _popcount_array(bitmaps):
    out = np.empty(bitmaps.shape[0], dtype=np.int64)
    for i in range(bitmaps.shape[0]):
        out[i] = _popcount64(bitmaps[i])
    return out


def popcount(bitmaps: np.ndarray) -> np.ndarray:
    return _popcount_array(np.ascontiguousarray(bitmaps, dtype=np.uint64))


@njit(cache=True)
def _encode(tiles):
    n = tiles.shape[0]
    bitmaps = np.zeros(n, dtype=np.uint64)
    offsets = np.zeros(n, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    total = 0
    for i in range(n):
        b = np.uint64(0)
        c = 0
        for j in range(64):
            if tiles[i, j] != 0:
                b |= np.uint64(1) << np.uint64(j)
                c += 1
        bitmaps[i] = b
        counts[i] = c
        offsets[i] = total
        total += (c + 7) // 8 * 8
    values = np.zeros(total, dtype=np.float32)
    for i in range(n):
        pos = offsets[i]
        for j in range(64):
            if tiles[i, j] != 0:
                values[pos] = tiles[i, j]
                pos += 1
    return bitmaps, offsets, values


def encode_tiles(tiles: np.ndarray):
    bitmaps, offsets, values = _encode(np.ascontiguousarray(tiles, dtype=np.float32))
    return bitmaps, offsets.astype(np.uint32), values


@njit(cache=True)
def _expand(b, values, pos, scratch):
    for j in range(64):
        if (b >> np.uint64(j)) & np.uint64(1):
            scratch[j] = values[pos]
            pos += 1
        else:
            scratch[j] = 0.0


@njit(cache=True)
def _decode(bitmaps, offsets, values, value_base, per_seg):
    n = bitmaps.shape[0]
    tiles = np.zeros((n, 64), dtype=np.float32)
    for i in range(n):
        _expand(bitmaps[i], values, value_base[i // per_seg] + offsets[i], tiles[i])
    return tiles


def decode_tiles(bitmaps, offsets, values, value_base=None, tiles_per_segment=None) -> np.ndarray:
    bitmaps = np.ascontiguousarray(bitmaps, dtype=np.uint64)
    if value_base is None:
        value_base = np.zeros(1, dtype=np.int64)
        tiles_per_segment = max(len(bitmaps), 1)
    return _decode(
        bitmaps,
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(values, dtype=np.float32),
        np.ascontiguousarray(value_base, dtype=np.int64),
        int(tiles_per_segment),
    )


@njit(cache=True)
def _spmv_keys(q, bitmaps, offsets, values, value_base, n_seg, d):
    g = q.shape[0]
    out = np.zeros((g, n_seg * 64), dtype=np.float32)
    scratch = np.zeros(64, dtype=np.float32)
    for s in range(n_seg):
        for c in range(d):
            t = s * d + c
            b = bitmaps[t]
            if b == 0:
                continue
            _expand(b, values, value_base[s] + offsets[t], scratch)
            for h in range(g):
                qc = q[h, c]
                for j in range(64):
                    out[h, s * 64 + j] += qc * scratch[j]
    return out


@njit(cache=True)
def _weighted_values(p, bitmaps, offsets, values, value_base, n_seg, d):
    g = p.shape[0]
    nb = d // 64
    out = np.zeros((g, d), dtype=np.float32)
    scratch = np.zeros(64, dtype=np.float32)
    for s in range(n_seg):
        for cb in range(nb):
            for tok in range(64):
                t = s * d + cb * 64 + tok
                b = bitmaps[t]
                if b == 0:
                    continue
                _expand(b, values, value_base[s] + offsets[t], scratch)
                for h in range(g):
                    w = p[h, s * 64 + tok]
                    for j in range(64):
                        out[h, cb * 64 + j] += w * scratch[j]
    return out


def _args(bitmaps, offsets, values, value_base):
    return (
        np.ascontiguousarray(bitmaps, dtype=np.uint64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(values, dtype=np.float32),
        np.ascontiguousarray(value_base, dtype=np.int64),
    )


def spmv_keys(q, bitmaps, offsets, values, value_base, n_seg: int, head_dim: int) -> np.ndarray:
    q = np.ascontiguousarray(np.atleast_2d(q), dtype=np.float32)
    return _spmv_keys(q, *_args(bitmaps, offsets, values, value_base), int(n_seg), int(head_dim))


def weighted_values(p, bitmaps, offsets, values, value_base, n_seg: int, head_dim: int) -> np.ndarray:
    p = np.ascontiguousarray(np.atleast_2d(p), dtype=np.float32)
    return _weighted_values(p, *_args(bitmaps, offsets, values, value_base), int(n_seg), int(head_dim))
