"""Dense matrix substrate, deterministic RNG and shared configuration types.

Token matrices are plain 2-D ``numpy.float32`` arrays laid out
``[tokens, channels]``.  The helpers here validate and construct them; no
wrapper class is imposed on callers.

The random generator is SplitMix64 evaluated in counter mode, so element
``i`` of a stream depends only on ``(seed, i)``.  Normal-like variates use the
Irwin-Hall sum of 12 uniforms, which needs only IEEE additions and
multiplications and therefore reproduces bit-for-bit on any platform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

TILE = 64
GROUP_TOKENS = 64
DEFAULT_WINDOW = 32

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class PruneMethod(str, enum.Enum):
    TOKEN_MAGNITUDE = "token_magnitude"
    TOKEN_OUTPUT_AWARE = "token_output_aware"
    CHANNEL_MAGNITUDE = "channel_magnitude"
    CHANNEL_OUTPUT_AWARE = "channel_output_aware"
    TWO_OF_FOUR = "two_of_four"

    @property
    def direction(self) -> str:
        return "channel" if self.name.startswith("CHANNEL") else "token"


@dataclass(frozen=True)
class ModelShape:
    head_dim: int = 128
    num_q_heads: int = 1
    num_kv_heads: int = 1
    element_bytes: int = 2

    def __post_init__(self):
        if self.head_dim < TILE or self.head_dim % TILE:
            raise ValueError(f"head_dim must be a positive multiple of {TILE}, got {self.head_dim}")
        if self.num_kv_heads < 1 or self.num_q_heads < 1:
            raise ValueError("head counts must be positive")
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError(
                f"num_q_heads ({self.num_q_heads}) must be a multiple of num_kv_heads ({self.num_kv_heads})"
            )
        if self.element_bytes < 1:
            raise ValueError("element_bytes must be positive")

    @property
    def group_size(self) -> int:
        """Query heads per KV head."""
        return self.num_q_heads // self.num_kv_heads

    def kv_head_of(self, q_head: int) -> int:
        return q_head // self.group_size


@dataclass(frozen=True)
class SparsityConfig:
    key_sparsity: float = 0.0
    value_sparsity: float = 0.0
    key_method: PruneMethod = PruneMethod.TOKEN_MAGNITUDE
    value_method: PruneMethod = PruneMethod.TOKEN_MAGNITUDE
    window: int = DEFAULT_WINDOW
    group_tokens: int = GROUP_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "key_method", PruneMethod(self.key_method))
        object.__setattr__(self, "value_method", PruneMethod(self.value_method))
        for name in ("key_sparsity", "value_sparsity"):
            s = getattr(self, name)
            if not 0.0 <= s < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {s}")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.group_tokens != GROUP_TOKENS:
            raise ValueError(f"group_tokens is fixed at {GROUP_TOKENS} by the tile geometry")
        if self.key_method is PruneMethod.TWO_OF_FOUR and self.key_sparsity != 0.5:
            raise ValueError("two_of_four key pruning requires key_sparsity == 0.5")
        if self.value_method is PruneMethod.TWO_OF_FOUR and self.value_sparsity != 0.5:
            raise ValueError("two_of_four value pruning requires value_sparsity == 0.5")


def as_token_matrix(m, cols: int | None = None) -> np.ndarray:
    """Validate ``m`` as a finite ``[tokens, channels]`` float32 matrix."""
    a = np.asarray(m, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"token matrix must be 2-D, got shape {a.shape}")
    if a.shape[1] < 1:
        raise ValueError("token matrix needs at least one channel")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"expected {cols} channels, got {a.shape[1]}")
    if not np.isfinite(a).all():
        raise ValueError("token matrix contains NaN or Inf")
    return a


def zeros(rows: int, cols: int) -> np.ndarray:
    if rows < 0:
        raise ValueError("rows must be non-negative")
    if cols < 1:
        raise ValueError("cols must be at least 1")
    return np.zeros((rows, cols), dtype=np.float32)


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer ``keys`` into ``seed`` to name an independent stream."""
    h = _mix64((seed + _GAMMA) & _MASK64)
    for k in keys:
        h = _mix64((h ^ _mix64((k * _GAMMA + _GAMMA) & _MASK64)) & _MASK64)
    return h


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 seeded with ``seed`` (uint64)."""
    with np.errstate(over="ignore"):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & _MASK64) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def uniform(seed: int, n: int) -> np.ndarray:
    """``n`` float64 uniforms on [0, 1) with 53 random bits each."""
    return (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def random_matrix(rows: int, cols: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """Deterministic zero-mean, unit-variance (times ``scale``) matrix."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    out = zeros(rows, cols)
    n = rows * cols
    if n == 0:
        return out
    u = uniform(seed, 12 * n).reshape(n, 12)
    acc = u[:, 0].copy()
    for j in range(1, 12):
        acc += u[:, j]
    out[:] = ((acc - 6.0) * scale).reshape(rows, cols)
    return out


def to_half_grid(m: np.ndarray) -> np.ndarray:
    """Round to the nearest fp16 value but keep float32 storage."""
    return np.asarray(m, dtype=np.float32).astype(np.float16).astype(np.float32)
