"""Companions applied jointly with pruning: token eviction and group quantization.

Eviction follows the heavy-hitter scheme: keep a budget of the most recent
tokens plus a budget of the tokens with the largest accumulated attention
mass.  Quantization is asymmetric uniform per group of 32 (per channel for
keys, per token for values), applied after pruning over kept entries only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

QUANT_GROUP = 32


def budget_count(fraction: float, total: int) -> int:
    """``ceil(fraction * total)`` evaluated exactly on the decimal fraction."""
    f = Fraction(str(fraction)) if isinstance(fraction, float) else Fraction(fraction)
    return min(total, math.ceil(f * total))


@dataclass
class EvictionPolicy:
    recent_budget: float = 0.10
    hh_budget: float = 0.10
    hh_scores: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))

    def __post_init__(self):
        for name in ("recent_budget", "hh_budget"):
            b = getattr(self, name)
            if not 0.0 < b <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {b}")
        self.hh_scores = np.asarray(self.hh_scores, dtype=np.float64)
        if (self.hh_scores < 0).any():
            raise ValueError("heavy-hitter scores must be non-negative")

    def observe(self, probs) -> None:
        """Add one step's attention probabilities to the running scores."""
        probs = np.asarray(probs, dtype=np.float64)
        if len(probs) > len(self.hh_scores):
            self.hh_scores = np.concatenate([self.hh_scores, np.zeros(len(probs) - len(self.hh_scores))])
        self.hh_scores[: len(probs)] += probs


def select_retained(policy: EvictionPolicy, total_tokens: int) -> np.ndarray:
    """Sorted indices of the tokens kept by ``policy`` out of ``total_tokens``."""
    if total_tokens < 1:
        raise ValueError("cannot select from an empty sequence")
    if len(policy.hh_scores) != total_tokens:
        raise ValueError(f"hh_scores has {len(policy.hh_scores)} entries, sequence has {total_tokens}")
    n_recent = budget_count(policy.recent_budget, total_tokens)
    n_hh = budget_count(policy.hh_budget, total_tokens)
    rest = total_tokens - n_recent
    # stable sort on negated score: ties go to the older token
    hh = np.argsort(-policy.hh_scores[:rest], kind="stable")[: min(n_hh, rest)]
    return np.sort(np.concatenate([hh, np.arange(rest, total_tokens)])).astype(np.int64)


class QuantAxis(str, enum.Enum):
    CHANNEL = "channel"  # groups run over tokens within one channel (keys)
    TOKEN = "token"  # groups run over channels within one token (values)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    axis: QuantAxis = QuantAxis.CHANNEL
    group_size: int = QUANT_GROUP

    def __post_init__(self):
        if self.bits not in (2, 4):
            raise ValueError(f"bits must be 2 or 4, got {self.bits}")
        object.__setattr__(self, "axis", QuantAxis(self.axis))
        if self.group_size != QUANT_GROUP:
            raise ValueError(f"group_size is fixed at {QUANT_GROUP}")


def quantize_group(values, bits: int):
    """Return ``(codes, scale, zero_point)`` for one group."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot quantize an empty group")
    if not np.isfinite(v).all():
        raise ValueError("group contains NaN or Inf")
    qmax = (1 << bits) - 1
    lo, hi = float(v.min()), float(v.max())
    scale = (hi - lo) / qmax if hi > lo else 1.0
    codes = np.clip(np.rint((v - lo) / scale), 0, qmax).astype(np.uint8)
    return codes, scale, lo


def dequantize_group(codes, scale: float, zero_point: float) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * scale + zero_point


@dataclass(frozen=True)
class QuantizedSparse:
    """Group-quantized pruned matrix.

    ``scale``/``zero_point`` follow the matrix layout with the grouped axis
    shrunk: ``[token // 32, channel]`` for CHANNEL, ``[token, channel // 32]``
    for TOKEN.  Groups with no kept entry carry NaN parameters and are not
    stored.
    """

    codes: np.ndarray
    keep: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    spec: QuantSpec
    reconstruction: np.ndarray

    @property
    def stored_groups(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.scale)))


def prune_then_quantize(m, mask, spec: QuantSpec) -> QuantizedSparse:
    m = np.asarray(m, dtype=np.float64)
    keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
    if keep.shape != m.shape:
        raise ValueError(f"mask shape {keep.shape} does not match matrix {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    # work on [unit, position] with position running along the group axis
    x, k = (m.T, keep.T) if spec.axis is QuantAxis.CHANNEL else (m, keep)
    units, span = x.shape
    n_groups = -(-span // spec.group_size)
    pad = n_groups * spec.group_size - span
    xg = np.pad(x, ((0, 0), (0, pad))).reshape(units, n_groups, spec.group_size)
    kg = np.pad(k, ((0, 0), (0, pad))).reshape(units, n_groups, spec.group_size)

    qmax = (1 << spec.bits) - 1
    has = kg.any(axis=2)
    lo = np.where(kg, xg, np.inf).min(axis=2)
    hi = np.where(kg, xg, -np.inf).max(axis=2)
    lo = np.where(has, lo, 0.0)
    hi = np.where(has, hi, 0.0)
    scale = np.where(hi > lo, (hi - lo) / qmax, 1.0)
    codes = np.clip(np.rint((xg - lo[..., None]) / scale[..., None]), 0, qmax)
    codes = np.where(kg, codes, 0).astype(np.uint8)
    recon = np.where(kg, codes * scale[..., None] + lo[..., None], 0.0)

    def back(a):
        a = a.reshape(units, n_groups * spec.group_size)[:, :span]
        return a.T if spec.axis is QuantAxis.CHANNEL else a

    def params(a):
        a = np.where(has, a, np.nan)
        return a.T if spec.axis is QuantAxis.CHANNEL else a

    return QuantizedSparse(
        codes=np.ascontiguousarray(back(codes)),
        keep=keep,
        scale=params(scale),
        zero_point=params(lo),
        spec=spec,
        reconstruction=np.ascontiguousarray(back(recon)),
    )


def quantized_bytes(nnz_padded: int, tiles: int, stored_groups: int, bits: int, model) -> int:
    """Bytes for bitmap storage with a ``bits``-wide payload plus fp16 group params."""
    return math.ceil(nnz_padded * bits / 8) + tiles * model.tile_overhead + stored_groups * 2 * model.element_bytes
