"""Bitmap-tile compressed storage for pruned 64-token KV cache blocks.

A block of 64 tokens by ``head_dim`` channels is cut into 1x64 tiles.  Each
tile stores a 64-bit occupancy bitmap, the nonzero values in ascending
position order padded with zeros to a multiple of 8, and the offset of its
payload inside the segment's value array.

Key blocks are tiled across the token dimension (tile ``c`` holds channel
``c`` of all 64 tokens, bit ``j`` = token ``j``).  Value blocks are tiled
across the channel dimension; inside each 64x64 warp-tile the 64 tiles are
the 64 tokens, and warp-tiles are visited in channel-major order, so tile
``b*64 + t`` holds channels ``64b .. 64b+63`` of token ``t``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_core import TILE, as_token_matrix

TOKEN_SPAN = 64
MAGIC = b"MSTF"
VERSION = 1
_HEADER = struct.Struct("<4sHBHHI")
_TILE_RECORD = np.dtype([("bitmap", "<u8"), ("offset", "<u4")])


class CorruptSegmentError(ValueError):
    """Raised when a segment's bitmaps, offsets and payload disagree."""


class TilingAxis(enum.IntEnum):
    KEY = 0  # tiles run across tokens
    VALUE = 1  # tiles run across channels

    @classmethod
    def coerce(cls, axis) -> "TilingAxis":
        if isinstance(axis, str):
            names = {"key": cls.KEY, "token": cls.KEY, "value": cls.VALUE, "channel": cls.VALUE}
            if axis.lower() not in names:
                raise ValueError(f"unknown tiling axis {axis!r}")
            return names[axis.lower()]
        return cls(axis)


@dataclass(frozen=True)
class SizeModel:
    element_bytes: int = 2
    bitmap_bytes: int = 8
    offset_bytes: int = 4
    pad_multiple: int = 8

    def __post_init__(self):
        if min(self.element_bytes, self.bitmap_bytes, self.offset_bytes, self.pad_multiple) <= 0:
            raise ValueError("all SizeModel fields must be positive")

    @property
    def tile_overhead(self) -> int:
        return self.bitmap_bytes + self.offset_bytes


@dataclass(frozen=True)
class Tile:
    bitmap: int
    payload: np.ndarray
    offset: int

    @property
    def nnz(self) -> int:
        return bin(self.bitmap).count("1")


def pad8(n):
    return (n + 7) // 8 * 8


@dataclass(frozen=True, eq=False)
class CompressedSegment:
    axis: TilingAxis
    head_dim: int
    bitmaps: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    token_span: int = TOKEN_SPAN

    @property
    def tile_count(self) -> int:
        return len(self.bitmaps)

    @property
    def nnz(self) -> int:
        return int(kernels.popcount(self.bitmaps).sum())

    @property
    def tiles(self) -> list[Tile]:
        counts = pad8(kernels.popcount(self.bitmaps))
        return [
            Tile(int(b), self.values[o : o + n], int(o))
            for b, o, n in zip(self.bitmaps, self.offsets, counts)
        ]

    def __eq__(self, other):
        if not isinstance(other, CompressedSegment):
            return NotImplemented
        return (
            self.axis == other.axis
            and self.head_dim == other.head_dim
            and self.token_span == other.token_span
            and np.array_equal(self.bitmaps, other.bitmaps)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )


def block_to_tiles(block: np.ndarray, axis: TilingAxis) -> np.ndarray:
    rows, d = block.shape
    if axis is TilingAxis.KEY:
        return np.ascontiguousarray(block.T)
    return np.ascontiguousarray(block.reshape(rows, d // TILE, TILE).transpose(1, 0, 2).reshape(-1, TILE))


def tiles_to_block(tiles: np.ndarray, axis: TilingAxis, head_dim: int) -> np.ndarray:
    if axis is TilingAxis.KEY:
        return np.ascontiguousarray(tiles.T)
    nb = head_dim // TILE
    return np.ascontiguousarray(tiles.reshape(nb, TOKEN_SPAN, TILE).transpose(1, 0, 2).reshape(TOKEN_SPAN, head_dim))


def compress(block, axis) -> CompressedSegment:
    axis = TilingAxis.coerce(axis)
    block = as_token_matrix(block)
    rows, d = block.shape
    if rows != TOKEN_SPAN:
        raise ValueError(f"a segment holds exactly {TOKEN_SPAN} tokens, got {rows}")
    if d % TILE:
        raise ValueError(f"head_dim must be a multiple of {TILE}, got {d}")
    bitmaps, offsets, values = kernels.encode_tiles(block_to_tiles(block, axis))
    return CompressedSegment(axis, d, bitmaps, offsets, values)


def _check_layout(seg: CompressedSegment) -> None:
    expected_tiles = seg.head_dim * seg.token_span // TILE
    if seg.token_span != TOKEN_SPAN or seg.head_dim % TILE:
        raise CorruptSegmentError(f"bad geometry: {seg.token_span} tokens x {seg.head_dim} channels")
    if seg.tile_count != expected_tiles or len(seg.offsets) != expected_tiles:
        raise CorruptSegmentError(f"expected {expected_tiles} tiles, found {seg.tile_count}")
    padded = pad8(kernels.popcount(seg.bitmaps))
    starts = np.concatenate([[0], np.cumsum(padded)[:-1]])
    bad = np.nonzero(starts != seg.offsets.astype(np.int64))[0]
    if len(bad):
        i = int(bad[0])
        raise CorruptSegmentError(f"tile {i}: offset {int(seg.offsets[i])} != cumulative payload {int(starts[i])}")
    if int(padded.sum()) != len(seg.values):
        raise CorruptSegmentError(f"payload holds {len(seg.values)} values, bitmaps require {int(padded.sum())}")


def _decode_checked(seg: CompressedSegment) -> np.ndarray:
    _check_layout(seg)
    tiles = kernels.decode_tiles(seg.bitmaps, seg.offsets, seg.values)
    decoded = np.count_nonzero(tiles)
    if decoded != np.count_nonzero(seg.values):
        raise CorruptSegmentError("payload has nonzero padding")
    if decoded != seg.nnz:
        raise CorruptSegmentError("a set bitmap bit maps to a zero payload value")
    return tiles


def validate(seg: CompressedSegment) -> None:
    """Check offsets, payload length and padding against the bitmaps."""
    _decode_checked(seg)


def decompress(seg: CompressedSegment) -> np.ndarray:
    return tiles_to_block(_decode_checked(seg), seg.axis, seg.head_dim)


def compressed_bytes(seg: CompressedSegment, model: SizeModel = SizeModel()) -> int:
    counts = kernels.popcount(seg.bitmaps)
    padded = (counts + model.pad_multiple - 1) // model.pad_multiple * model.pad_multiple
    return int(padded.sum()) * model.element_bytes + seg.tile_count * model.tile_overhead


def dense_bytes(tokens: int, head_dim: int, model: SizeModel = SizeModel()) -> int:
    return tokens * head_dim * model.element_bytes


def compression_ratio(nbytes: int, tokens: int, head_dim: int, model: SizeModel = SizeModel()) -> float:
    if tokens < 1:
        raise ValueError("compression ratio needs at least one token")
    return nbytes / dense_bytes(tokens, head_dim, model)


def is_half_exact(values: np.ndarray) -> bool:
    values = np.asarray(values, dtype=np.float32)
    return bool(np.array_equal(values.astype(np.float16).astype(np.float32), values))


def to_bytes(seg: CompressedSegment) -> bytes:
    """Serialise ``seg``; payload values must be exactly representable in fp16."""
    if not is_half_exact(seg.values):
        raise ValueError("segment payload is not representable in half precision")
    header = _HEADER.pack(MAGIC, VERSION, int(seg.axis), seg.token_span, seg.head_dim, seg.tile_count)
    rec = np.empty(seg.tile_count, dtype=_TILE_RECORD)
    rec["bitmap"] = seg.bitmaps
    rec["offset"] = seg.offsets
    return header + rec.tobytes() + seg.values.astype("<f2").tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[CompressedSegment, int]:
    """Parse one segment starting at ``offset``; returns it and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise CorruptSegmentError("truncated segment header")
    magic, version, axis, span, d, count = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CorruptSegmentError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptSegmentError(f"unsupported segment version {version}")
    pos = offset + _HEADER.size
    rec_end = pos + count * _TILE_RECORD.itemsize
    if len(buf) < rec_end:
        raise CorruptSegmentError("truncated tile table")
    rec = np.frombuffer(buf, dtype=_TILE_RECORD, count=count, offset=pos)
    bitmaps = rec["bitmap"].astype(np.uint64)
    offsets = rec["offset"].astype(np.uint32)
    n_values = int(pad8(kernels.popcount(bitmaps)).sum())
    end = rec_end + 2 * n_values
    if len(buf) < end:
        raise CorruptSegmentError("truncated payload")
    values = np.frombuffer(buf, dtype="<f2", count=n_values, offset=rec_end).astype(np.float32)
    try:
        seg = CompressedSegment(TilingAxis(axis), d, bitmaps, offsets, values, span)
    except ValueError as exc:
        raise CorruptSegmentError(str(exc)) from exc
    validate(seg)
    return seg, end
