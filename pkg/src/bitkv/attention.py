"""Decode-step attention over a dense local window plus compressed segments.

Scores against compressed keys and the weighted sum over compressed values
run directly on the bitmap tiles; the dense window uses ordinary matrix
products.  Softmax is taken over the concatenation, compressed tokens first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitmap_format as bf
from . import kernels
from .kv_cache import KVCache, PackedSegments


@dataclass
class AttentionOutput:
    out: np.ndarray
    scores: np.ndarray | None = None


def _packed(segments, head_dim: int, axis: bf.TilingAxis) -> PackedSegments:
    if isinstance(segments, PackedSegments):
        if segments.axis is not axis:
            raise ValueError(f"expected {axis.name} segments, got {segments.axis.name}")
        return segments
    for seg in segments:
        if seg.axis is not axis:
            raise ValueError(f"expected {axis.name} segments, got {seg.axis.name}")
    return PackedSegments.from_segments(segments, head_dim, axis)


def dense_scores(q, k_local) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    k_local = np.asarray(k_local, dtype=np.float32)
    if k_local.ndim != 2 or q.shape[-1] != k_local.shape[1]:
        raise ValueError(f"query length {q.shape[-1]} does not match key channels {k_local.shape}")
    return q @ k_local.T


def spmv_scores(q, segments_k, head_dim: int | None = None) -> np.ndarray:
    """Scores of ``q`` (``[d]`` or ``[G, d]``) against compressed keys."""
    q = np.asarray(q, dtype=np.float32)
    d = q.shape[-1] if head_dim is None else head_dim
    if q.shape[-1] != d:
        raise ValueError(f"query length {q.shape[-1]} does not match head_dim {d}")
    p = _packed(segments_k, d, bf.TilingAxis.KEY)
    s = kernels.spmv_keys(np.atleast_2d(q), p.bitmaps, p.offsets, p.values, p.value_base, p.n_segments, d)
    return s[0] if q.ndim == 1 else s


def softmax_concat(s_compressed, s_local, head_dim: int, scaled: bool = True) -> np.ndarray:
    """Row-wise softmax of ``concat(s_compressed, s_local)``.

    With ``scaled`` the scores are divided by ``sqrt(head_dim)`` first.
    """
    s = np.concatenate([np.atleast_2d(s_compressed), np.atleast_2d(s_local)], axis=-1).astype(np.float32)
    if s.shape[-1] == 0:
        raise ValueError("softmax over an empty score row")
    if scaled:
        s = s * np.float32(1.0 / np.sqrt(head_dim))
    m = s.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("every score in a row is -inf")
    e = np.exp(s - m)
    p = e / e.sum(axis=-1, keepdims=True)
    return p[0] if np.ndim(s_compressed) == 1 and np.ndim(s_local) == 1 else p


def weighted_values(p_compressed, segments_v, p_local, v_local, head_dim: int | None = None) -> np.ndarray:
    p_c = np.asarray(p_compressed, dtype=np.float32)
    p_l = np.asarray(p_local, dtype=np.float32)
    v_local = np.asarray(v_local, dtype=np.float32)
    d = v_local.shape[1] if head_dim is None else head_dim
    packed = _packed(segments_v, d, bf.TilingAxis.VALUE)
    if p_c.shape[-1] != packed.tokens or p_l.shape[-1] != len(v_local):
        raise ValueError(
            f"probability lengths ({p_c.shape[-1]}, {p_l.shape[-1]}) do not match "
            f"regions ({packed.tokens}, {len(v_local)})"
        )
    out = kernels.weighted_values(
        np.atleast_2d(p_c), packed.bitmaps, packed.offsets, packed.values, packed.value_base, packed.n_segments, d
    )
    out += np.atleast_2d(p_l) @ v_local
    return out[0] if p_c.ndim == 1 else out


def decode_attention(q_step, cache: KVCache, scaled: bool = True, active=None) -> list[AttentionOutput]:
    """Attention output of every query head for one decode step.

    ``active`` optionally gives, per KV head, a boolean row over all cached
    tokens; inactive (evicted) tokens receive zero probability.
    """
    shape = cache.shape
    q = np.asarray(q_step, dtype=np.float32).reshape(shape.num_q_heads, shape.head_dim)
    if cache.total_tokens == 0:
        raise ValueError("decode attention over an empty cache")
    g = shape.group_size
    results: list[AttentionOutput] = []
    for h in range(shape.num_kv_heads):
        reg = cache.regions(h)
        qg = q[h * g : (h + 1) * g]
        s_c = spmv_scores(qg, reg.key_compressed, shape.head_dim)
        s_l = dense_scores(qg, reg.key_local)
        if active is not None:
            mask = np.asarray(active[h], dtype=bool)
            s_c = np.where(mask[: reg.n_compressed], s_c, -np.inf)
            s_l = np.where(mask[reg.n_compressed :], s_l, -np.inf)
        p = softmax_concat(s_c, s_l, shape.head_dim, scaled)
        ns = reg.n_compressed
        out = weighted_values(p[:, :ns], reg.value_compressed, p[:, ns:], reg.value_local, shape.head_dim)
        results.extend(AttentionOutput(out[i], p[i]) for i in range(g))
    return results


def dense_reference_attention(q, k, v, head_dim: int | None = None, scaled: bool = True, active=None) -> np.ndarray:
    """Plain ``softmax(q K^T / sqrt(d)) V`` in float64."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape[0] != v.shape[0] or k.shape[1] != q.shape[-1]:
        raise ValueError(f"incompatible shapes q{q.shape} K{k.shape} V{v.shape}")
    d = q.shape[-1] if head_dim is None else head_dim
    s = q @ k.T
    if scaled:
        s = s / np.sqrt(d)
    if active is not None:
        s = np.where(np.asarray(active, dtype=bool), s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True)) @ v
