"""Property suite behind ``bitkv verify``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bitmap_format as bf
from .pruning import apply_mask, prune_by_score, prune_token_magnitude, pruned_count
from .simulator import RunConfig, Simulation, traffic_bound
from .tensor_core import PruneMethod, derive_seed, random_matrix


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def _random_pruned_block(seed: int, d: int, sparsity: float) -> np.ndarray:
    m = random_matrix(64, d, seed)
    return apply_mask(m, prune_token_magnitude(m, sparsity)).astype(np.float16).astype(np.float32)


def check_round_trip(cfg: RunConfig, blocks: int = 200) -> Check:
    d = cfg.shape.head_dim
    for i in range(blocks):
        seed = derive_seed(cfg.seed, 100, i)
        s = (0.0, 0.3, 0.5, 0.7, 0.9)[i % 5]
        block = _random_pruned_block(seed, d, s)
        for axis in bf.TilingAxis:
            seg = bf.compress(block, axis)
            back = bf.decompress(seg)
            loaded, _ = bf.from_bytes(bf.to_bytes(seg))
            if not (np.array_equal(back, block) and loaded == seg):
                return Check("round_trip", False, f"mismatch for block seed={seed} axis={axis.name} sparsity={s}")
    return Check("round_trip", True, f"{blocks} blocks x 2 axes bit-exact, serialisation stable")


def check_corruption(cfg: RunConfig) -> Check:
    seg = bf.compress(_random_pruned_block(cfg.seed, cfg.shape.head_dim, 0.5), "key")
    offsets = seg.offsets.copy()
    offsets[1] += 8
    bad = bf.CompressedSegment(seg.axis, seg.head_dim, seg.bitmaps, offsets, seg.values)
    try:
        bf.decompress(bad)
    except bf.CorruptSegmentError:
        pass
    else:
        return Check("corruption", False, f"corrupted offset decoded silently (seed={cfg.seed})")
    try:
        bf.from_bytes(bf.to_bytes(seg)[:-3])
    except bf.CorruptSegmentError:
        return Check("corruption", True, "offset corruption and truncation rejected")
    return Check("corruption", False, f"truncated segment parsed (seed={cfg.seed})")


def brute_force_token_mask(m: np.ndarray, sparsity: float) -> np.ndarray:
    keep = np.ones(m.shape, dtype=bool)
    p = pruned_count(sparsity, m.shape[1])
    for r, row in enumerate(m):
        order = sorted(range(len(row)), key=lambda c: (abs(float(row[c])), c))
        keep[r, order[:p]] = False
    return keep


def check_topk(cfg: RunConfig, trials: int = 50) -> Check:
    for i in range(trials):
        seed = derive_seed(cfg.seed, 200, i)
        m = random_matrix(16, cfg.shape.head_dim, seed)
        s = max(cfg.sparsity.key_sparsity, cfg.sparsity.value_sparsity, 0.3)
        if not np.array_equal(prune_token_magnitude(m, s).keep, brute_force_token_mask(m, s)):
            return Check("topk_oracle", False, f"token mask differs from brute force (seed={seed})")
        w = 0.5 + random_matrix(16, 1, seed + 1)[:, 0] ** 2
        weighted = prune_by_score(m, np.abs(m) * w[:, None], s, "token")
        if not np.array_equal(weighted.keep, prune_token_magnitude(m, s).keep):
            return Check("topk_oracle", False, f"per-token weighting changed the mask (seed={seed})")
    return Check("topk_oracle", True, f"{trials} matrices match brute force")


def check_two_of_four(sim: Simulation) -> Check:
    for h, head in enumerate(sim.cache.heads):
        for name, segs, method in (
            ("key", head.segments_k, sim.config.sparsity.key_method),
            ("value", head.segments_v, sim.config.sparsity.value_method),
        ):
            if method is not PruneMethod.TWO_OF_FOUR:
                continue
            for i, seg in enumerate(segs):
                nz = (bf.decompress(seg) != 0).reshape(64, -1, 4).sum(axis=2)
                if (nz > 2).any():
                    return Check("two_of_four", False, f"head {h} {name} segment {i} has a 4-group with >2 nonzeros")
    return Check("two_of_four", True, "every aligned 4-group holds at most 2 nonzeros")


def check_conservation(sim: Simulation) -> Check:
    n = sim.cache.total_tokens
    for h, head in enumerate(sim.cache.heads):
        for segs, dense, shadow in (
            (head.segments_k, head.dense_k, sim.shadow_k[h, :n]),
            (head.segments_v, head.dense_v, sim.shadow_v[h, :n]),
        ):
            stacked = np.concatenate([bf.decompress(s) for s in segs] + [dense])
            if not np.array_equal(stacked, shadow):
                return Check("conservation", False, f"head {h}: stored regions differ from pruned history")
    return Check("conservation", True, "segments + dense window equal masked history")


def check_accounting(sim: Simulation) -> Check:
    cache = sim.cache
    sm = cache.size_model
    mem = cache.memory_bytes()
    # recount from decompressed blocks, independent of the stored bitmaps
    for name, s, method, attr in (
        ("key", cache.config.key_sparsity, cache.config.key_method, "segments_k"),
        ("value", cache.config.value_sparsity, cache.config.value_method, "segments_v"),
    ):
        if s == 0 and method is not PruneMethod.TWO_OF_FOUR:
            continue
        total = 0
        for head in cache.heads:
            for seg in getattr(head, attr):
                tiles = bf.block_to_tiles(bf.decompress(seg), seg.axis)
                nnz = (tiles != 0).sum(axis=1)
                total += int(((nnz + 7) // 8 * 8).sum()) * sm.element_bytes + len(tiles) * sm.tile_overhead
            total += bf.dense_bytes(head.dense_count, head.head_dim, sm)
        if total != mem[name]:
            return Check("accounting", False, f"{name} bytes {mem[name]} != recount {total}")
    bound = traffic_bound(cache)
    for name, b in bound.items():
        if not b["ok"]:
            return Check("accounting", False, f"{name} traffic {b['moved']} exceeds bound {b['bound']:.0f}")
    return Check("accounting", True, "byte model recount and traffic bound hold")


def run_checks(cfg: RunConfig) -> list[Check]:
    checks = [check_round_trip(cfg), check_corruption(cfg), check_topk(cfg)]
    sim = Simulation(cfg)
    report = sim.run()
    agg = report["aggregate"]
    tol = 1e-4 if agg["total_tokens"] >= 4096 else 1e-5
    checks.append(
        Check(
            "attention_equivalence",
            agg["max_rel_error"] <= tol,
            f"max relative error {agg['max_rel_error']:.2e} (tolerance {tol:g}, seed={cfg.seed})",
        )
    )
    checks.append(Check("window_protection", agg["window_intact"], "recent window bit-identical to originals"))
    checks.append(check_conservation(sim))
    checks.append(check_accounting(sim))
    if PruneMethod.TWO_OF_FOUR in (cfg.sparsity.key_method, cfg.sparsity.value_method):
        checks.append(check_two_of_four(sim))
    return checks


def verify(cfg: RunConfig, emit: Callable[[str], None] | None = None) -> bool:
    ok = True
    for c in run_checks(cfg):
        if emit:
            emit(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
        ok &= c.ok
    return ok


__all__ = ["Check", "run_checks", "verify"]
