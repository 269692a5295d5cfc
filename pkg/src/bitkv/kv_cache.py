"""Per-head KV cache with a dense local window and compressed 64-token segments.

Tokens enter the dense region.  Whenever the dense region holds at least
``window + 64`` tokens, its oldest 64 tokens are pruned with the configured
methods, compressed into one Key and one Value segment and appended after
the existing segments.  The newest ``window`` tokens are therefore never
pruned.  Prefill ingestion runs the same rule over the prompt.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bitmap_format as bf
from .orthogonal import QuantAxis, QuantSpec, prune_then_quantize
from .pruning import PruneMask, QueryAccumulator, ScoreAccumulator, apply_mask, prune
from .tensor_core import GROUP_TOKENS, ModelShape, PruneMethod, SparsityConfig, as_token_matrix, to_half_grid

SNAPSHOT_FORMAT = "bitkv-snapshot"
SNAPSHOT_VERSION = 1
MANIFEST = "manifest.json"
SEGMENTS = "segments.mstf"


class SnapshotError(ValueError):
    pass


@dataclass
class PackedSegments:
    """Concatenated tile arrays of a chronological segment list, kernel-ready."""

    head_dim: int
    axis: bf.TilingAxis = bf.TilingAxis.KEY
    bitmaps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    value_base: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_segments(self) -> int:
        return len(self.value_base)

    @property
    def tokens(self) -> int:
        return GROUP_TOKENS * self.n_segments

    @classmethod
    def from_segments(cls, segments, head_dim: int, axis) -> "PackedSegments":
        packed = cls(head_dim, bf.TilingAxis.coerce(axis))
        for seg in segments:
            packed.append(seg)
        return packed

    def append(self, seg: bf.CompressedSegment) -> None:
        if seg.axis is not self.axis or seg.head_dim != self.head_dim:
            raise ValueError("segment axis or head_dim does not match the packed store")
        self.value_base = np.append(self.value_base, len(self.values)).astype(np.int64)
        self.bitmaps = np.concatenate([self.bitmaps, seg.bitmaps])
        self.offsets = np.concatenate([self.offsets, seg.offsets])
        self.values = np.concatenate([self.values, seg.values])


@dataclass
class Regions:
    """The four inputs of decode attention for one KV head."""

    key_compressed: PackedSegments
    value_compressed: PackedSegments
    key_local: np.ndarray
    value_local: np.ndarray

    @property
    def n_compressed(self) -> int:
        return self.key_compressed.tokens

    @property
    def n_dense(self) -> int:
        return len(self.key_local)


@dataclass
class Compaction:
    """Audit record of one 64-token compaction."""

    start: int
    key_mask: PruneMask
    value_mask: PruneMask


class HeadCache:
    """Cache state of a single KV head."""

    def __init__(self, head_dim: int, config: SparsityConfig, quant: QuantSpec | None = None):
        self.head_dim = head_dim
        self.config = config
        self.quant = quant
        cap = config.window + GROUP_TOKENS
        self._dense_k = np.zeros((cap, head_dim), dtype=np.float32)
        self._dense_v = np.zeros((cap, head_dim), dtype=np.float32)
        self.dense_count = 0
        self.segments_k: list[bf.CompressedSegment] = []
        self.segments_v: list[bf.CompressedSegment] = []
        self.packed_k = PackedSegments(head_dim, bf.TilingAxis.KEY)
        self.packed_v = PackedSegments(head_dim, bf.TilingAxis.VALUE)
        self.q_acc = QueryAccumulator(head_dim)
        self.s_acc = ScoreAccumulator()
        self.compactions: list[Compaction] = []

    @property
    def n_compressed(self) -> int:
        return GROUP_TOKENS * len(self.segments_k)

    @property
    def total_tokens(self) -> int:
        return self.n_compressed + self.dense_count

    @property
    def dense_k(self) -> np.ndarray:
        return self._dense_k[: self.dense_count]

    @property
    def dense_v(self) -> np.ndarray:
        return self._dense_v[: self.dense_count]

    def push(self, k: np.ndarray, v: np.ndarray) -> None:
        self._dense_k[self.dense_count] = k
        self._dense_v[self.dense_count] = v
        self.dense_count += 1
        if self.dense_count >= self.config.window + GROUP_TOKENS:
            self._compact()

    def _compact(self) -> None:
        cfg = self.config
        start = self.n_compressed
        block_k = self._dense_k[:GROUP_TOKENS].copy()
        block_v = self._dense_v[:GROUP_TOKENS].copy()
        q_w = self.q_acc.acc if self.q_acc.count else None
        # only channel-output-aware value pruning is fed attention rows
        s_w = self.s_acc.weights(start, start + GROUP_TOKENS) if self.s_acc.count else None
        mk = prune(block_k, cfg.key_method, cfg.key_sparsity, q_w, "channel")
        mv = prune(block_v, cfg.value_method, cfg.value_sparsity, s_w, "token")
        pk = stored_block(block_k, mk, self.quant, QuantAxis.CHANNEL)
        pv = stored_block(block_v, mv, self.quant, QuantAxis.TOKEN)
        self._append_segments(bf.compress(pk, bf.TilingAxis.KEY), bf.compress(pv, bf.TilingAxis.VALUE))
        self.compactions.append(Compaction(start, mk, mv))
        rest = self.dense_count - GROUP_TOKENS
        self._dense_k[:rest] = self._dense_k[GROUP_TOKENS : self.dense_count]
        self._dense_v[:rest] = self._dense_v[GROUP_TOKENS : self.dense_count]
        self.dense_count = rest

    def _append_segments(self, sk: bf.CompressedSegment, sv: bf.CompressedSegment) -> None:
        self.segments_k.append(sk)
        self.segments_v.append(sv)
        self.packed_k.append(sk)
        self.packed_v.append(sv)

    def regions(self) -> Regions:
        return Regions(self.packed_k, self.packed_v, self.dense_k, self.dense_v)


def stored_block(block: np.ndarray, mask: PruneMask, quant: QuantSpec | None, axis: QuantAxis) -> np.ndarray:
    """Values actually written to a segment for ``block`` under ``mask``."""
    pruned = apply_mask(block, mask)
    if quant is None:
        return pruned
    q = prune_then_quantize(block, mask, QuantSpec(quant.bits, axis))
    out = to_half_grid(q.reconstruction)
    out[~mask.keep] = 0.0
    out[out == 0] = 0.0
    return out


class KVCache:
    """Cache state of all KV heads of one attention layer."""

    def __init__(
        self,
        config: SparsityConfig,
        shape: ModelShape,
        quant: QuantSpec | None = None,
        size_model: bf.SizeModel | None = None,
    ):
        self.config = config
        self.shape = shape
        self.quant = quant
        self.size_model = size_model or bf.SizeModel(element_bytes=shape.element_bytes)
        self.heads = [HeadCache(shape.head_dim, config, quant) for _ in range(shape.num_kv_heads)]

    @property
    def total_tokens(self) -> int:
        return self.heads[0].total_tokens

    @classmethod
    def from_prefill(cls, k, v, config: SparsityConfig, shape: ModelShape, quant: QuantSpec | None = None) -> "KVCache":
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if k.ndim == 2:
            k, v = k[None], v[None]
        if k.shape != v.shape:
            raise ValueError(f"key shape {k.shape} != value shape {v.shape}")
        if k.shape[0] != shape.num_kv_heads or k.shape[2] != shape.head_dim:
            raise ValueError(f"prefill must be [{shape.num_kv_heads}, L, {shape.head_dim}], got {k.shape}")
        if k.shape[1] < 1:
            raise ValueError("prefill needs at least one token")
        cache = cls(config, shape, quant)
        for h, head in enumerate(cache.heads):
            kh = as_token_matrix(k[h])
            vh = as_token_matrix(v[h])
            for t in range(len(kh)):
                head.push(kh[t], vh[t])
        return cache

    def append_token(self, k_vec, v_vec, q_step) -> None:
        """Add one decoded token to every KV head.

        ``k_vec``/``v_vec`` are ``[kv_heads, d]``; ``q_step`` is ``[q_heads, d]``
        and is absorbed into each head's query accumulator before compaction.
        """
        d, g = self.shape.head_dim, self.shape.group_size
        k = np.asarray(k_vec, dtype=np.float32).reshape(self.shape.num_kv_heads, -1)
        v = np.asarray(v_vec, dtype=np.float32).reshape(self.shape.num_kv_heads, -1)
        q = np.asarray(q_step, dtype=np.float32).reshape(self.shape.num_q_heads, -1)
        if k.shape[1] != d or v.shape[1] != d or q.shape[1] != d:
            raise ValueError(f"vectors must have {d} channels")
        if not (np.isfinite(k).all() and np.isfinite(v).all()):
            raise ValueError("cache entries must be finite")
        for h, head in enumerate(self.heads):
            head.q_acc.absorb(q[h * g : (h + 1) * g])
            head.push(k[h], v[h])

    def regions(self, head: int = 0) -> Regions:
        return self.heads[head].regions()

    def record_attention_scores(self, alpha) -> None:
        """Feed post-softmax rows ``alpha[q_heads, total_tokens]`` to value scoring.

        Rows of the query heads sharing a KV head are summed.  Only dense-region
        positions are kept, since compressed tokens can no longer be pruned.
        """
        if self.config.value_method is not PruneMethod.CHANNEL_OUTPUT_AWARE:
            return
        a = np.atleast_2d(np.asarray(alpha, dtype=np.float32))
        if a.shape != (self.shape.num_q_heads, self.total_tokens):
            raise ValueError(f"alpha must be [{self.shape.num_q_heads}, {self.total_tokens}], got {a.shape}")
        g = self.shape.group_size
        for h, head in enumerate(self.heads):
            row = np.abs(a[h * g : (h + 1) * g]).sum(axis=0)
            head.s_acc.absorb(row[head.n_compressed :], start=head.n_compressed)

    def memory_bytes(self) -> dict[str, int]:
        """Modeled storage of the Key and Value caches.

        A cache configured with zero sparsity would be kept uncompressed, so it
        is charged at dense size even though the simulator still routes it
        through segments.
        """
        sm = self.size_model
        out = {}
        for name, sparsity, method in (
            ("key", self.config.key_sparsity, self.config.key_method),
            ("value", self.config.value_sparsity, self.config.value_method),
        ):
            total = 0
            for head in self.heads:
                if sparsity == 0 and method is not PruneMethod.TWO_OF_FOUR:
                    total += bf.dense_bytes(head.total_tokens, head.head_dim, sm)
                    continue
                segs = head.segments_k if name == "key" else head.segments_v
                total += sum(bf.compressed_bytes(s, sm) for s in segs)
                total += bf.dense_bytes(head.dense_count, head.head_dim, sm)
            out[name] = total
        return out

    def dense_bytes(self) -> int:
        return 2 * self.shape.num_kv_heads * bf.dense_bytes(self.total_tokens, self.shape.head_dim, self.size_model)


def init_from_prefill(k, v, config: SparsityConfig, shape: ModelShape, quant: QuantSpec | None = None) -> KVCache:
    return KVCache.from_prefill(k, v, config, shape, quant)


def _b64(a: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")


def _unb64(s: str, dtype: str, shape=None) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s.encode("ascii"), validate=True), dtype=dtype).astype(np.float32)
    return a.reshape(shape) if shape is not None else a


def _config_dict(config: SparsityConfig) -> dict:
    d = asdict(config)
    d["key_method"] = config.key_method.value
    d["value_method"] = config.value_method.value
    return d


def dump(cache: KVCache, path, extra: dict | None = None) -> Path:
    """Write ``cache`` to directory ``path`` as a manifest plus MSTF segments."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    heads = []
    blob = bytearray()
    for head in cache.heads:
        if not (bf.is_half_exact(head.dense_k) and bf.is_half_exact(head.dense_v)):
            raise ValueError("dense region is not representable in half precision")
        for seg in head.segments_k + head.segments_v:
            blob += bf.to_bytes(seg)
        heads.append(
            {
                "segments": len(head.segments_k),
                "dense_count": head.dense_count,
                "dense_k": _b64(head.dense_k, "<f2"),
                "dense_v": _b64(head.dense_v, "<f2"),
                "q_acc": [_b64(s, "<f4") for s in head.q_acc.steps],
                "s_acc": [{"start": s, "values": _b64(r, "<f4")} for s, r in head.s_acc.rows],
            }
        )
    manifest = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "config": _config_dict(cache.config),
        "shape": asdict(cache.shape),
        "quant": None if cache.quant is None else {"bits": cache.quant.bits},
        "total_tokens": cache.total_tokens,
        "heads": heads,
        "segments_bytes": len(blob),
        "extra": extra or {},
    }
    (path / SEGMENTS).write_bytes(bytes(blob))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load(path) -> tuple[KVCache, dict]:
    """Read a snapshot written by :func:`dump`; returns ``(cache, extra)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / SEGMENTS).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"cannot read snapshot at {os.fspath(path)}: {exc}") from exc
    if manifest.get("format") != SNAPSHOT_FORMAT or manifest.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot {manifest.get('format')!r} v{manifest.get('version')!r}")
    if manifest["segments_bytes"] != len(blob):
        raise SnapshotError(f"segment file has {len(blob)} bytes, manifest expects {manifest['segments_bytes']}")
    try:
        config = SparsityConfig(**manifest["config"])
        shape = ModelShape(**manifest["shape"])
        quant = None if manifest["quant"] is None else QuantSpec(manifest["quant"]["bits"])
        cache = KVCache(config, shape, quant)
        if len(manifest["heads"]) != shape.num_kv_heads:
            raise SnapshotError("head count does not match shape")
        pos = 0
        for head, info in zip(cache.heads, manifest["heads"]):
            segs = []
            for _ in range(2 * info["segments"]):
                seg, pos = bf.from_bytes(blob, pos)
                if seg.head_dim != shape.head_dim:
                    raise SnapshotError("segment head_dim does not match shape")
                segs.append(seg)
            n = info["segments"]
            for sk, sv in zip(segs[:n], segs[n:]):
                if sk.axis is not bf.TilingAxis.KEY or sv.axis is not bf.TilingAxis.VALUE:
                    raise SnapshotError("segment axes out of order")
                head._append_segments(sk, sv)
            dc = info["dense_count"]
            if dc > config.window + GROUP_TOKENS - 1:
                raise SnapshotError(f"dense region of {dc} tokens exceeds the compaction threshold")
            head._dense_k[:dc] = _unb64(info["dense_k"], "<f2", (dc, shape.head_dim))
            head._dense_v[:dc] = _unb64(info["dense_v"], "<f2", (dc, shape.head_dim))
            head.dense_count = dc
            for s in info["q_acc"]:
                head.q_acc.steps.append(_unb64(s, "<f4"))
            for r in info["s_acc"]:
                head.s_acc.rows.append((int(r["start"]), _unb64(r["values"], "<f4")))
        if pos != len(blob):
            raise SnapshotError("trailing bytes after the last segment")
        if cache.total_tokens != manifest["total_tokens"]:
            raise SnapshotError("total_tokens does not match stored regions")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SnapshotError):
            raise
        raise SnapshotError(f"malformed snapshot: {exc}") from exc
    return cache, manifest.get("extra", {})
