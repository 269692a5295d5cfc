"""Synthetic prefill + decode workloads run through the compressed cache.

Every decode step is computed twice: once by the compressed pipeline and
once by float64 dense attention over a shadow copy of the history in which
each compacted group has been zero-filled with the mask the cache used.  The
report carries the memory accounting and the worst disagreement.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bitmap_format as bf
from . import kernels
from .attention import decode_attention, dense_reference_attention
from .kv_cache import KVCache, dump, load, stored_block
from .orthogonal import EvictionPolicy, QuantAxis, QuantSpec, quantized_bytes, select_retained
from .pruning import pruned_count
from .tensor_core import ModelShape, PruneMethod, SparsityConfig, derive_seed, random_matrix, to_half_grid, uniform

OUTLIER_SCALE = 10.0
REPORT_VERSION = 1

# stream ids for derive_seed
_PREFILL_K, _PREFILL_V, _QUERY, _STEP_K, _STEP_V, _OUTLIER, _PROBE = range(1, 8)


@dataclass(frozen=True)
class RunConfig:
    seq_len: int = 2048
    gen_len: int = 256
    shape: ModelShape = field(default_factory=ModelShape)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    eviction: tuple[float, float] | None = None
    quant_bits: int | None = None
    outlier_channels: int = 0
    seed: int = 0
    scaled: bool = True
    report_path: str | None = None

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("--seq-len must be at least 1")
        if self.gen_len < 0:
            raise ValueError("--gen-len must be non-negative")
        if not 0 <= self.outlier_channels <= self.shape.head_dim:
            raise ValueError(f"--outlier-channels must lie in [0, {self.shape.head_dim}]")
        if self.eviction is not None:
            EvictionPolicy(*self.eviction)
        if self.quant_bits is not None:
            QuantSpec(self.quant_bits)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sparsity"]["key_method"] = self.sparsity.key_method.value
        d["sparsity"]["value_method"] = self.sparsity.value_method.value
        d["eviction"] = None if self.eviction is None else list(self.eviction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["shape"] = ModelShape(**d["shape"])
        d["sparsity"] = SparsityConfig(**d["sparsity"])
        d["eviction"] = None if d.get("eviction") is None else tuple(d["eviction"])
        return cls(**d)


def relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    """``max|out - ref| / max|ref|`` over one output vector."""
    denom = float(np.max(np.abs(ref)))
    err = float(np.max(np.abs(np.asarray(out, dtype=np.float64) - ref)))
    return err / denom if denom > 0 else err


class Simulation:
    """Stateful dual-path run; can be snapshotted and resumed."""

    def __init__(self, config: RunConfig):
        self.config = config
        shape = config.shape
        cap = config.seq_len + config.gen_len
        d = shape.head_dim
        self.outliers = self._outlier_channels()
        self.quant = None if config.quant_bits is None else QuantSpec(config.quant_bits)
        self.history_k = np.zeros((shape.num_kv_heads, cap, d), dtype=np.float32)
        self.history_v = np.zeros_like(self.history_k)
        self.shadow_k = np.zeros_like(self.history_k)
        self.shadow_v = np.zeros_like(self.history_k)
        self.policies = (
            None if config.eviction is None else [EvictionPolicy(*config.eviction) for _ in range(shape.num_kv_heads)]
        )
        self.evicted = [np.zeros(0, dtype=bool) for _ in range(shape.num_kv_heads)]
        self.cache: KVCache | None = None
        self.step_index = 0
        self.steps: list[dict] = []
        self.timing = {"prefill_s": 0.0, "decode_s": 0.0, "oracle_s": 0.0}
        self._synced = [0] * shape.num_kv_heads

    def _outlier_channels(self) -> np.ndarray:
        n = self.config.outlier_channels
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        u = uniform(derive_seed(self.config.seed, _OUTLIER), self.config.shape.head_dim)
        return np.sort(np.argsort(u, kind="stable")[:n])

    def _keys(self, rows: int, seed: int) -> np.ndarray:
        m = random_matrix(rows, self.config.shape.head_dim, seed)
        m[:, self.outliers] *= OUTLIER_SCALE
        return to_half_grid(m)

    def _values(self, rows: int, seed: int) -> np.ndarray:
        return to_half_grid(random_matrix(rows, self.config.shape.head_dim, seed))

    def query(self, step: int) -> np.ndarray:
        shape = self.config.shape
        return random_matrix(shape.num_q_heads, shape.head_dim, derive_seed(self.config.seed, _QUERY, step))

    def prefill(self) -> None:
        cfg = self.config
        L = cfg.seq_len
        t0 = time.perf_counter()
        for h in range(cfg.shape.num_kv_heads):
            self.history_k[h, :L] = self._keys(L, derive_seed(cfg.seed, _PREFILL_K, h))
            self.history_v[h, :L] = self._values(L, derive_seed(cfg.seed, _PREFILL_V, h))
        self.shadow_k[:, :L] = self.history_k[:, :L]
        self.shadow_v[:, :L] = self.history_v[:, :L]
        self.cache = KVCache.from_prefill(
            self.history_k[:, :L], self.history_v[:, :L], cfg.sparsity, cfg.shape, self.quant
        )
        self.timing["prefill_s"] += time.perf_counter() - t0
        self._sync_shadow()

    def _sync_shadow(self) -> None:
        """Zero-fill newly compacted groups of the shadow with the masks used."""
        for h, head in enumerate(self.cache.heads):
            for c in head.compactions[self._synced[h] :]:
                sl = slice(c.start, c.start + 64)
                self.shadow_k[h, sl] = stored_block(self.history_k[h, sl], c.key_mask, self.quant, QuantAxis.CHANNEL)
                self.shadow_v[h, sl] = stored_block(self.history_v[h, sl], c.value_mask, self.quant, QuantAxis.TOKEN)
            self._synced[h] = len(head.compactions)

    def _active(self, n: int):
        if self.policies is None:
            return None
        rows = []
        for h, policy in enumerate(self.policies):
            policy.observe(np.zeros(n))
            keep = np.zeros(n, dtype=bool)
            keep[select_retained(policy, n)] = True
            ev = np.concatenate([self.evicted[h], np.zeros(n - len(self.evicted[h]), dtype=bool)])
            keep &= ~ev
            self.evicted[h] = ev | ~keep
            rows.append(keep)
        return rows

    def _attend(self, q: np.ndarray, active) -> tuple[list, float]:
        shape = self.config.shape
        n = self.cache.total_tokens
        t0 = time.perf_counter()
        outs = decode_attention(q, self.cache, self.config.scaled, active)
        t1 = time.perf_counter()
        worst = 0.0
        for i, o in enumerate(outs):
            h = shape.kv_head_of(i)
            ref = dense_reference_attention(
                q[i], self.shadow_k[h, :n], self.shadow_v[h, :n], shape.head_dim, self.config.scaled,
                None if active is None else active[h],
            )
            worst = max(worst, relative_error(o.out, ref))
        self.timing["decode_s"] += t1 - t0
        self.timing["oracle_s"] += time.perf_counter() - t1
        return outs, worst

    def step(self) -> dict:
        cfg = self.config
        shape = cfg.shape
        t = self.step_index
        pos = self.cache.total_tokens
        q = self.query(t)
        k = self._keys(shape.num_kv_heads, derive_seed(cfg.seed, _STEP_K, t))
        v = self._values(shape.num_kv_heads, derive_seed(cfg.seed, _STEP_V, t))
        self.history_k[:, pos] = k
        self.history_v[:, pos] = v
        self.shadow_k[:, pos] = k
        self.shadow_v[:, pos] = v
        t0 = time.perf_counter()
        self.cache.append_token(k, v, q)
        self.timing["decode_s"] += time.perf_counter() - t0
        self._sync_shadow()
        n = self.cache.total_tokens
        active = self._active(n)
        outs, worst = self._attend(q, active)
        probs = np.stack([o.scores for o in outs])
        self.cache.record_attention_scores(probs)
        if self.policies is not None:
            g = shape.group_size
            for h, policy in enumerate(self.policies):
                policy.observe(probs[h * g : (h + 1) * g].sum(axis=0))
        rec = self._accounting()
        rec.update(step=t, max_rel_error=worst)
        if active is not None:
            rec["retained_tokens"] = int(sum(a.sum() for a in active))
        self.steps.append(rec)
        self.step_index += 1
        return rec

    def probe_error(self) -> float:
        """Oracle disagreement for a query that does not advance the run."""
        q = random_matrix(
            self.config.shape.num_q_heads, self.config.shape.head_dim, derive_seed(self.config.seed, _PROBE)
        )
        return self._attend(q, None)[1]

    def _accounting(self) -> dict:
        mem = self.cache.memory_bytes()
        compressed = mem["key"] + mem["value"]
        dense = self.cache.dense_bytes()
        rec = {
            "total_tokens": self.cache.total_tokens,
            "compressed_bytes": compressed,
            "key_bytes": mem["key"],
            "value_bytes": mem["value"],
            "dense_bytes": dense,
            "compression_ratio": compressed / dense,
            "bytes_moved_model": compressed / dense,
        }
        if self.quant is not None:
            rec["quantized_bytes"] = quantized_cache_bytes(self.cache)
        return rec

    def window_intact(self) -> bool:
        w = self.config.sparsity.window
        n = self.cache.total_tokens
        for h, head in enumerate(self.cache.heads):
            m = min(w, n)
            if not (
                np.array_equal(head.dense_k[-m:], self.history_k[h, n - m : n])
                and np.array_equal(head.dense_v[-m:], self.history_v[h, n - m : n])
            ):
                return False
        return True

    def report(self) -> dict:
        final = self._accounting()
        errors = [s["max_rel_error"] for s in self.steps] or [self.probe_error()]
        ratios = [s["compression_ratio"] for s in self.steps] or [final["compression_ratio"]]
        return {
            "version": REPORT_VERSION,
            "config": self.config.to_dict(),
            "kernel_backend": kernels.BACKEND,
            "aggregate": {
                **final,
                "mean_compression_ratio": float(np.mean(ratios)),
                "max_rel_error": float(max(errors)),
                "mean_rel_error": float(np.mean(errors)),
                "window_intact": self.window_intact(),
                "segments_per_head": len(self.cache.heads[0].segments_k),
                "dense_tokens_per_head": self.cache.heads[0].dense_count,
            },
            "steps": list(self.steps),
            "timing": dict(self.timing),
        }

    def dump(self, path) -> Path:
        extra = {
            "run_config": self.config.to_dict(),
            "step_index": self.step_index,
            "steps": self.steps,
        }
        if self.policies is not None:
            extra["eviction"] = [
                {"hh_scores": p.hh_scores.tolist(), "evicted": np.nonzero(e)[0].tolist()}
                for p, e in zip(self.policies, self.evicted)
            ]
        return dump(self.cache, path, extra)

    @classmethod
    def load(cls, path, gen_len: int | None = None) -> "Simulation":
        """Resume from a snapshot; ``gen_len`` extends the remaining steps."""
        cache, extra = load(path)
        cfg = RunConfig.from_dict(extra["run_config"])
        done = int(extra["step_index"])
        if gen_len is not None:
            cfg = RunConfig(**{**cfg.__dict__, "gen_len": done + gen_len})
        sim = cls(cfg)
        sim.cache = cache
        sim.step_index = done
        sim.steps = list(extra.get("steps", []))
        n = cache.total_tokens
        # compressed groups reload already pruned; the shadow starts from them
        for h, head in enumerate(cache.heads):
            rows = [bf.decompress(s) for s in head.segments_k]
            ks = np.concatenate(rows + [head.dense_k]) if rows else head.dense_k
            rows = [bf.decompress(s) for s in head.segments_v]
            vs = np.concatenate(rows + [head.dense_v]) if rows else head.dense_v
            sim.shadow_k[h, :n], sim.shadow_v[h, :n] = ks, vs
            sim.history_k[h, head.n_compressed : n] = head.dense_k
            sim.history_v[h, head.n_compressed : n] = head.dense_v
        if "eviction" in extra:
            for h, state in enumerate(extra["eviction"]):
                sim.policies[h].hh_scores = np.asarray(state["hh_scores"], dtype=np.float64)
                ev = np.zeros(n, dtype=bool)
                ev[state["evicted"]] = True
                sim.evicted[h] = ev[: len(sim.policies[h].hh_scores)]
        return sim

    def run(self) -> dict:
        if self.cache is None:
            self.prefill()
        while self.step_index < self.config.gen_len:
            self.step()
        return self.report()


def quantized_cache_bytes(cache: KVCache) -> int:
    """Storage if the pruned payload were kept at ``quant.bits`` with fp16 group params."""
    sm = cache.size_model
    bits = cache.quant.bits
    total = 0
    for head in cache.heads:
        for segs, axis in ((head.segments_k, QuantAxis.CHANNEL), (head.segments_v, QuantAxis.TOKEN)):
            for seg in segs:
                block = bf.decompress(seg)
                groups = _nonempty_groups(block != 0, axis)
                total += quantized_bytes(len(seg.values), seg.tile_count, groups, bits, sm)
        total += 2 * bf.dense_bytes(head.dense_count, head.head_dim, sm)
    return total


def _nonempty_groups(keep: np.ndarray, axis: QuantAxis, group: int = 32) -> int:
    k = keep.T if axis is QuantAxis.CHANNEL else keep
    units, span = k.shape
    n = -(-span // group)
    k = np.pad(k, ((0, 0), (0, n * group - span))).reshape(units, n, group)
    return int(k.any(axis=2).sum())


def run(config: RunConfig) -> dict:
    """Execute ``config`` and return the report (also written to ``report_path``)."""
    report = Simulation(config).run()
    if config.report_path:
        write_report(report, config.report_path)
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def effective_sparsity(method: PruneMethod, sparsity: float, head_dim: int) -> float:
    """Fraction actually pruned per unit under the floor rule."""
    if method is PruneMethod.TWO_OF_FOUR:
        return 0.5
    if method.direction == "token":
        return pruned_count(sparsity, head_dim) / head_dim
    return pruned_count(sparsity, 32) / 32


def traffic_bound(cache: KVCache) -> dict:
    """Analytic upper bound on score+value traffic vs the modeled traffic.

    For each pruned cache: kept payload is at most ``(1 - s_eff)`` of the
    compressed region, plus per-tile bitmap/offset bytes, plus at most 7
    padding elements per tile, plus the dense window at full size.
    """
    cfg, sm, d = cache.config, cache.size_model, cache.shape.head_dim
    mem = cache.memory_bytes()
    out = {}
    for name, s, method in (
        ("key", cfg.key_sparsity, cfg.key_method),
        ("value", cfg.value_sparsity, cfg.value_method),
    ):
        bound = 0.0
        for head in cache.heads:
            if s == 0 and method is not PruneMethod.TWO_OF_FOUR:
                bound += bf.dense_bytes(head.total_tokens, d, sm)
                continue
            tiles = len(head.segments_k) * d
            comp = bf.dense_bytes(head.n_compressed, d, sm)
            bound += (1 - effective_sparsity(method, s, d)) * comp
            bound += tiles * (sm.tile_overhead + 7 * sm.element_bytes)
            bound += bf.dense_bytes(head.dense_count, d, sm)
        out[name] = {"moved": mem[name], "bound": bound, "ok": mem[name] <= bound + 1e-9}
    return out
