"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--segments 32] [--head-dim 128] [--sparsity 0.7] [--repeat 20]

Each kernel is timed on identical inputs after a warm-up call (which also
triggers numba compilation), and the outputs of the two backends are checked
for agreement before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from bitkv import bitmap_format as bf
from bitkv.kernels import BACKENDS, get_backend
from bitkv.pruning import apply_mask, prune_token_magnitude
from bitkv.tensor_core import random_matrix


def build_inputs(n_seg: int, d: int, sparsity: float):
    blocks = []
    for i in range(n_seg):
        m = random_matrix(64, d, seed=i)
        blocks.append(apply_mask(m, prune_token_magnitude(m, sparsity)))
    key_tiles = np.concatenate([bf.block_to_tiles(b, bf.TilingAxis.KEY) for b in blocks])
    val_tiles = [bf.block_to_tiles(b, bf.TilingAxis.VALUE) for b in blocks]
    return key_tiles, val_tiles


def pack(mod, tiles_per_seg):
    bs, os_, vs, base, pos = [], [], [], [], 0
    for t in tiles_per_seg:
        b, o, v = mod.encode_tiles(t)
        bs.append(b)
        os_.append(o)
        vs.append(v)
        base.append(pos)
        pos += len(v)
    return np.concatenate(bs), np.concatenate(os_), np.concatenate(vs), np.array(base, dtype=np.int64)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--segments", type=int, default=32)
    ap.add_argument("--head-dim", type=int, default=128)
    ap.add_argument("--sparsity", type=float, default=0.7)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    n, d = args.segments, args.head_dim

    key_tiles, val_tiles = build_inputs(n, d, args.sparsity)
    key_segs = [key_tiles[i * d : (i + 1) * d] for i in range(n)]
    q = random_matrix(4, d, seed=99)
    p = np.abs(random_matrix(4, n * 64, seed=98))

    rows = []
    results = {}
    for name in BACKENDS:
        mod = get_backend(name)
        kb = pack(mod, key_segs)
        vb = pack(mod, val_tiles)
        cases = {
            "encode": lambda: mod.encode_tiles(key_tiles),
            "decode": lambda: mod.decode_tiles(*kb[:3], kb[3], d),
            "spmv_keys": lambda: mod.spmv_keys(q, *kb, n, d),
            "weighted_values": lambda: mod.weighted_values(p, *vb, n, d),
        }
        results[name] = {k: f() for k, f in cases.items()}  # warm-up + outputs
        for k, f in cases.items():
            best = min(timeit.repeat(f, number=1, repeat=args.repeat))
            rows.append((k, name, best))

    ref, other = results[BACKENDS[0]], results[BACKENDS[1]]
    for k in ref:
        a, b = ref[k], other[k]
        if isinstance(a, tuple):
            assert all(np.array_equal(x, y) for x, y in zip(a, b)), k
        else:
            assert np.allclose(a, b, rtol=1e-5, atol=1e-4), k

    print(f"{n} segments x 64 tokens, head_dim {d}, sparsity {args.sparsity}, best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in BACKENDS) + f"{'speedup':>10}")
    for k in ref:
        t = {b: dt for kk, b, dt in rows if kk == k}
        print(
            f"{k:<16}"
            + "".join(f"{t[b] * 1e3:>10.3f}ms" for b in BACKENDS)
            + f"{t[BACKENDS[1]] / t[BACKENDS[0]]:>9.1f}x"
        )


if __name__ == "__main__":
    main()
