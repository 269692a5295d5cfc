"""Vectorised numpy implementations of the bitmap tile kernels.

Tiles of a segment are stored tile-major as ``bitmaps[T]`` (uint64),
``offsets[T]`` (uint32, relative to the segment) and a flat ``values`` array.
Multi-segment kernels take the concatenation of several segments' arrays
plus ``value_base[s]``, the start of segment ``s`` in the joint value array.
"""

from __future__ import annotations

import numpy as np

_SHIFTS = np.arange(64, dtype=np.uint64)


def popcount(bitmaps: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(bitmaps, dtype=np.uint64)).astype(np.int64)


def encode_tiles(tiles: np.ndarray):
    """Pack a ``[T, 64]`` tile matrix into (bitmaps, offsets, values)."""
    nz = tiles != 0
    bitmaps = (nz.astype(np.uint64) << _SHIFTS).sum(axis=1, dtype=np.uint64)
    counts = nz.sum(axis=1)
    padded = (counts + 7) // 8 * 8
    offsets = np.zeros(len(tiles), dtype=np.int64)
    np.cumsum(padded[:-1], out=offsets[1:])
    values = np.zeros(int(padded.sum()), dtype=np.float32)
    r, c = np.nonzero(nz)
    rank = np.arange(len(r)) - np.repeat(np.cumsum(counts) - counts, counts)
    values[offsets[r] + rank] = tiles[r, c]
    return bitmaps, offsets.astype(np.uint32), values


def decode_tiles(bitmaps, offsets, values, value_base=None, tiles_per_segment=None) -> np.ndarray:
    """Expand packed tiles back to a dense ``[T, 64]`` matrix."""
    bitmaps = np.asarray(bitmaps, dtype=np.uint64)
    start = np.asarray(offsets, dtype=np.int64)
    if value_base is not None:
        start = start + np.repeat(np.asarray(value_base, dtype=np.int64), tiles_per_segment)
    bits = ((bitmaps[:, None] >> _SHIFTS) & np.uint64(1)).astype(bool)
    counts = bits.sum(axis=1)
    r, c = np.nonzero(bits)
    rank = np.arange(len(r)) - np.repeat(np.cumsum(counts) - counts, counts)
    tiles = np.zeros((len(bitmaps), 64), dtype=np.float32)
    tiles[r, c] = values[start[r] + rank]
    return tiles


def spmv_keys(q, bitmaps, offsets, values, value_base, n_seg: int, head_dim: int) -> np.ndarray:
    """Scores ``[G, n_seg*64]`` of queries ``q[G, d]`` against Key segments."""
    q = np.asarray(q, dtype=np.float32)
    if n_seg == 0:
        return np.zeros((q.shape[0], 0), dtype=np.float32)
    tiles = decode_tiles(bitmaps, offsets, values, value_base, head_dim)
    tiles = tiles.reshape(n_seg, head_dim, 64)
    return np.einsum("gc,sct->gst", q, tiles).reshape(q.shape[0], n_seg * 64)


def weighted_values(p, bitmaps, offsets, values, value_base, n_seg: int, head_dim: int) -> np.ndarray:
    """Outputs ``[G, d]`` of probabilities ``p[G, n_seg*64]`` times Value segments."""
    p = np.asarray(p, dtype=np.float32)
    if n_seg == 0:
        return np.zeros((p.shape[0], head_dim), dtype=np.float32)
    nb = head_dim // 64
    tiles = decode_tiles(bitmaps, offsets, values, value_base, head_dim)
    tiles = tiles.reshape(n_seg, nb, 64, 64)
    out = np.einsum("gst,sbtj->gbj", p.reshape(p.shape[0], n_seg, 64), tiles)
    return out.reshape(p.shape[0], head_dim)
