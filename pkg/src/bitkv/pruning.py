"""Keep/prune mask generation for unstructured and 2:4 KV cache pruning.

Every selector prunes the ``floor(sparsity * n)`` lowest-scoring entries of
each pruning unit (a token row, or a channel within a 32-token group).  Ties
are resolved by pruning the lower index first, which is exactly what a stable
ascending argsort yields.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import PruneMethod, as_token_matrix

ACC_WINDOW = 32
CHANNEL_GROUP = 32


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray
    method: PruneMethod
    target_sparsity: float

    @property
    def shape(self):
        return self.keep.shape

    @property
    def pruned(self) -> int:
        return int(self.keep.size - np.count_nonzero(self.keep))


def pruned_count(sparsity: float, n: int) -> int:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    # Guard against 0.7 * 10 == 6.999999... style representation error.
    return int(math.floor(sparsity * n + 1e-9))


def _smallest_rows(score: np.ndarray, p: int) -> np.ndarray:
    """Keep mask pruning the ``p`` smallest entries of every row."""
    keep = np.ones(score.shape, dtype=bool)
    if p == 0 or score.shape[0] == 0:
        return keep
    order = np.argsort(score, axis=1, kind="stable")[:, :p]
    np.put_along_axis(keep, order, False, axis=1)
    return keep


def prune_by_score(
    m,
    score,
    sparsity: float,
    direction: str = "token",
    group: int = CHANNEL_GROUP,
    method: PruneMethod = PruneMethod.TOKEN_MAGNITUDE,
) -> PruneMask:
    """Prune the lowest-``score`` entries along ``direction``.

    ``direction="token"`` prunes within each token row.  ``direction="channel"``
    prunes within each channel over consecutive ``group``-token spans; a
    trailing partial span uses its own length in the count.
    """
    m = as_token_matrix(m)
    score = np.asarray(score, dtype=np.float64)
    if score.shape != m.shape:
        raise ValueError(f"score shape {score.shape} does not match matrix {m.shape}")
    if direction == "token":
        keep = _smallest_rows(score, pruned_count(sparsity, m.shape[1]))
    elif direction == "channel":
        if group != CHANNEL_GROUP:
            raise ValueError(f"channel-direction pruning uses {CHANNEL_GROUP}-token groups")
        keep = np.ones(m.shape, dtype=bool)
        for lo in range(0, m.shape[0], group):
            hi = min(lo + group, m.shape[0])
            p = pruned_count(sparsity, hi - lo)
            keep[lo:hi] = _smallest_rows(score[lo:hi].T, p).T
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return PruneMask(keep, PruneMethod(method), sparsity)


def prune_token_magnitude(m, sparsity: float) -> PruneMask:
    m = as_token_matrix(m)
    return prune_by_score(m, np.abs(m), sparsity, "token", method=PruneMethod.TOKEN_MAGNITUDE)


def prune_channel_magnitude(m, sparsity: float) -> PruneMask:
    m = as_token_matrix(m)
    return prune_by_score(m, np.abs(m), sparsity, "channel", method=PruneMethod.CHANNEL_MAGNITUDE)


def prune_two_of_four(m) -> PruneMask:
    """Prune the two smallest-magnitude entries of every aligned 4-group."""
    m = as_token_matrix(m)
    rows, cols = m.shape
    if cols % 4:
        raise ValueError(f"2:4 pruning needs channels divisible by 4, got {cols}")
    groups = np.abs(m).reshape(rows * cols // 4, 4)
    keep = _smallest_rows(groups, 2).reshape(rows, cols)
    return PruneMask(keep, PruneMethod.TWO_OF_FOUR, 0.5)


def key_output_aware_score(k, q_acc: "QueryAccumulator") -> np.ndarray:
    k = as_token_matrix(k)
    acc = np.asarray(q_acc.acc)
    if acc.shape != (k.shape[1],):
        raise ValueError(f"query accumulator has length {acc.shape}, keys have {k.shape[1]} channels")
    if q_acc.count < 1:
        raise ValueError("query accumulator is empty")
    return np.abs(k).astype(np.float64) * acc.astype(np.float64)[None, :]


def value_channel_output_aware_score(v, weights) -> np.ndarray:
    """``|V|`` scaled per token by accumulated attention mass ``weights``.

    ``weights`` is either a ScoreAccumulator already aligned to ``v`` or a
    plain per-token vector.
    """
    v = as_token_matrix(v)
    w = np.asarray(weights.acc if isinstance(weights, ScoreAccumulator) else weights, dtype=np.float64)
    if w.shape != (v.shape[0],):
        raise ValueError(f"score weights have length {w.shape}, values have {v.shape[0]} tokens")
    return np.abs(v).astype(np.float64) * w[:, None]


def apply_mask(m, mask: PruneMask) -> np.ndarray:
    m = as_token_matrix(m)
    if mask.keep.shape != m.shape:
        raise ValueError(f"mask shape {mask.keep.shape} does not match matrix {m.shape}")
    out = np.where(mask.keep, m, np.float32(0.0)).astype(np.float32)
    # -0.0 would not survive a bitmap round trip
    out[out == 0] = 0.0
    return out


@dataclass
class QueryAccumulator:
    """Sliding-window L1 sum of the queries seen by one KV head.

    Each absorbed step contributes ``sum_h |q_h|`` over the query heads that
    share the KV head.  Only the most recent ``ACC_WINDOW`` steps are kept.
    """

    head_dim: int
    window: int = ACC_WINDOW
    steps: deque = field(default_factory=deque)

    def __post_init__(self):
        self.steps = deque(self.steps, maxlen=self.window)

    @property
    def count(self) -> int:
        return len(self.steps)

    @property
    def acc(self) -> np.ndarray:
        out = np.zeros(self.head_dim, dtype=np.float32)
        for s in self.steps:
            out += s
        return out

    def absorb(self, q_step) -> "QueryAccumulator":
        q = np.atleast_2d(np.asarray(q_step, dtype=np.float32))
        if q.shape[1] != self.head_dim:
            raise ValueError(f"query has {q.shape[1]} channels, accumulator expects {self.head_dim}")
        self.steps.append(np.abs(q).sum(axis=0, dtype=np.float32))
        return self


def absorb_query(q_acc: QueryAccumulator, q_step) -> QueryAccumulator:
    """Copying form of :meth:`QueryAccumulator.absorb`."""
    out = QueryAccumulator(q_acc.head_dim, q_acc.window, deque(q_acc.steps))
    return out.absorb(q_step)


@dataclass
class ScoreAccumulator:
    """Sliding-window sum of ``|alpha|`` rows keyed by absolute token position.

    A row recorded with ``start=s`` covers positions ``s, s+1, ...``.  The
    window keeps the latest ``ACC_WINDOW`` rows.
    """

    window: int = ACC_WINDOW
    rows: deque = field(default_factory=deque)

    def __post_init__(self):
        self.rows = deque(self.rows, maxlen=self.window)

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def span(self) -> tuple[int, int]:
        if not self.rows:
            return (0, 0)
        return (min(s for s, _ in self.rows), max(s + len(r) for s, r in self.rows))

    @property
    def acc(self) -> np.ndarray:
        lo, hi = self.span
        return self.weights(lo, hi)

    def absorb(self, row, start: int = 0) -> "ScoreAccumulator":
        self.rows.append((int(start), np.abs(np.asarray(row, dtype=np.float32))))
        return self

    def weights(self, lo: int, hi: int) -> np.ndarray:
        """Accumulated mass for absolute positions ``[lo, hi)``."""
        out = np.zeros(hi - lo, dtype=np.float32)
        for s, r in self.rows:
            a, b = max(lo, s), min(hi, s + len(r))
            if a < b:
                out[a - lo : b - lo] += r[a - s : b - s]
        return out


def prune(
    m,
    method: PruneMethod,
    sparsity: float,
    weights: np.ndarray | None = None,
    weight_axis: str = "channel",
) -> PruneMask:
    """Dispatch a configured pruning method.

    ``weights`` is the output-awareness vector: per channel (accumulated |Q|,
    for keys) when ``weight_axis="channel"``, per token (accumulated |alpha|,
    for values) when ``weight_axis="token"``.  Output-aware methods without
    weights fall back to plain magnitude.
    """
    m = as_token_matrix(m)
    method = PruneMethod(method)
    if method is PruneMethod.TWO_OF_FOUR:
        return prune_two_of_four(m)
    score = np.abs(m).astype(np.float64)
    if method in (PruneMethod.TOKEN_OUTPUT_AWARE, PruneMethod.CHANNEL_OUTPUT_AWARE) and weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        score = score * (w[None, :] if weight_axis == "channel" else w[:, None])
    return prune_by_score(m, score, sparsity, method.direction, method=method)
