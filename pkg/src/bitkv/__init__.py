"""Unstructured KV cache pruning with bitmap-compressed decode attention."""

from .attention import AttentionOutput, decode_attention, dense_reference_attention
from .bitmap_format import CompressedSegment, CorruptSegmentError, SizeModel, TilingAxis, compress, decompress
from .kv_cache import KVCache, init_from_prefill
from .pruning import PruneMask, apply_mask, prune, prune_token_magnitude, prune_two_of_four
from .tensor_core import ModelShape, PruneMethod, SparsityConfig, random_matrix, zeros

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "CompressedSegment",
    "CorruptSegmentError",
    "KVCache",
    "ModelShape",
    "PruneMask",
    "PruneMethod",
    "SizeModel",
    "SparsityConfig",
    "TilingAxis",
    "apply_mask",
    "compress",
    "decode_attention",
    "decompress",
    "dense_reference_attention",
    "init_from_prefill",
    "prune",
    "prune_token_magnitude",
    "prune_two_of_four",
    "random_matrix",
    "zeros",
]
