import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitkv import bitmap_format as bf
from bitkv import kv_cache
from bitkv.kv_cache import KVCache, SnapshotError, init_from_prefill
from bitkv.orthogonal import QuantSpec
from bitkv.pruning import apply_mask, prune_token_magnitude
from bitkv.tensor_core import ModelShape, SparsityConfig, random_matrix, to_half_grid


def make_cache(L, d=64, config=None, shape=None, seed=0, quant=None):
    shape = shape or ModelShape(d, 1, 1)
    config = config or SparsityConfig(0.5, 0.5)
    k = to_half_grid(random_matrix(shape.num_kv_heads * L, d, seed)).reshape(shape.num_kv_heads, L, d)
    v = to_half_grid(random_matrix(shape.num_kv_heads * L, d, seed + 1)).reshape(shape.num_kv_heads, L, d)
    return init_from_prefill(k, v, config, shape, quant), k, v


def append(cache, seed):
    s = cache.shape
    k = to_half_grid(random_matrix(s.num_kv_heads, s.head_dim, seed))
    v = to_half_grid(random_matrix(s.num_kv_heads, s.head_dim, seed + 1))
    q = random_matrix(s.num_q_heads, s.head_dim, seed + 2)
    cache.append_token(k, v, q)
    return k, v


@pytest.mark.parametrize("L, segments, dense", [(100, 1, 36), (31, 0, 31), (2048, 31, 64), (96, 1, 32), (95, 0, 95)])
def test_prefill_examples(L, segments, dense):
    cache, _, _ = make_cache(L)
    head = cache.heads[0]
    assert (len(head.segments_k), head.dense_count, cache.total_tokens) == (segments, dense, L)
    reg = cache.regions()
    assert (reg.n_compressed, reg.n_dense) == (64 * segments, dense)


def test_append_at_95_compacts():
    cache, _, _ = make_cache(95)
    append(cache, 1)
    assert cache.heads[0].dense_count == 32 and len(cache.heads[0].segments_k) == 1


def test_append_at_10():
    cache, _, _ = make_cache(10)
    append(cache, 1)
    assert cache.heads[0].dense_count == 11 and not cache.heads[0].segments_k


def test_new_segment_equals_masked_evicted_tokens():
    cache, k, v = make_cache(95, d=128, config=SparsityConfig(0.7, 0.7))
    append(cache, 3)
    head = cache.heads[0]
    expect_k = apply_mask(k[0, :64], prune_token_magnitude(k[0, :64], 0.7))
    expect_v = apply_mask(v[0, :64], prune_token_magnitude(v[0, :64], 0.7))
    assert bf.decompress(head.segments_k[0]).tobytes() == expect_k.tobytes()
    assert bf.decompress(head.segments_v[0]).tobytes() == expect_v.tobytes()
    assert head.segments_k[0].axis is bf.TilingAxis.KEY


def test_prefill_errors():
    shape = ModelShape(64)
    with pytest.raises(ValueError):
        init_from_prefill(np.ones((10, 64)), np.ones((11, 64)), SparsityConfig(), shape)
    with pytest.raises(ValueError):
        init_from_prefill(np.ones((0, 64)), np.ones((0, 64)), SparsityConfig(), shape)
    with pytest.raises(ValueError):
        init_from_prefill(np.ones((5, 128)), np.ones((5, 128)), SparsityConfig(), shape)


def test_append_errors():
    cache, _, _ = make_cache(10)
    with pytest.raises(ValueError):
        cache.append_token(np.ones(32), np.ones(64), np.ones(64))
    with pytest.raises(ValueError):
        cache.append_token(np.full(64, np.inf), np.ones(64), np.ones(64))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 300), st.integers(0, 200), st.sampled_from([8, 32, 40]))
def test_cache_invariants(L, steps, window):
    cfg = SparsityConfig(0.5, 0.3, window=window)
    cache, _, _ = make_cache(L, config=cfg)
    first = None
    for i in range(steps):
        append(cache, 1000 + i)
        head = cache.heads[0]
        n = cache.total_tokens
        assert n == L + i + 1 == 64 * len(head.segments_k) + head.dense_count
        assert min(n, window) <= head.dense_count <= window + 63
        if head.segments_k and first is None:
            first = bf.to_bytes(head.segments_k[0])
    if first is not None:
        assert bf.to_bytes(cache.heads[0].segments_k[0]) == first


def test_window_tokens_bit_identical():
    cache, k, v = make_cache(200, config=SparsityConfig(0.9, 0.9))
    ks = [k[0]]
    for i in range(77):
        kk, _ = append(cache, 50 + i)
        ks.append(kk)
    hist = np.concatenate(ks)
    assert cache.heads[0].dense_k[-32:].tobytes() == hist[-32:].tobytes()


def test_gqa_heads_independent():
    shape = ModelShape(64, 4, 2)
    cache, k, _ = make_cache(100, shape=shape)
    assert len(cache.heads) == 2
    for h in range(2):
        np.testing.assert_array_equal(cache.heads[h].dense_k, k[h, 64:])


def test_query_accumulator_absorbs_group():
    shape = ModelShape(64, 4, 2)
    cache, _, _ = make_cache(10, shape=shape)
    q = np.zeros((4, 64))
    q[0, 0] = 1.0
    q[1, 0] = -2.0
    q[2, 1] = 5.0
    cache.append_token(np.zeros((2, 64)), np.zeros((2, 64)), q)
    assert cache.heads[0].q_acc.acc[0] == 3.0 and cache.heads[0].q_acc.acc[1] == 0.0
    assert cache.heads[1].q_acc.acc[1] == 5.0


def test_record_attention_scores_example():
    cfg = SparsityConfig(0.5, 0.5, value_method="channel_output_aware")
    cache, _, _ = make_cache(2, config=cfg)
    cache.record_attention_scores([0.6, 0.4])
    cache.record_attention_scores([0.2, 0.8])
    np.testing.assert_allclose(cache.heads[0].s_acc.acc, [0.8, 1.2], rtol=1e-6)
    before = cache.heads[0].s_acc.acc.copy()
    cache.record_attention_scores([0.0, 0.0])
    np.testing.assert_array_equal(cache.heads[0].s_acc.acc, before)
    with pytest.raises(ValueError):
        cache.record_attention_scores([1.0])


def test_record_attention_scores_is_noop_for_magnitude():
    cache, _, _ = make_cache(2)
    cache.record_attention_scores([1.0])  # wrong length is ignored when not needed
    assert cache.heads[0].s_acc.count == 0


def test_record_attention_scores_dense_positions_only():
    cfg = SparsityConfig(0.5, 0.5, value_method="channel_output_aware")
    cache, _, _ = make_cache(100, config=cfg)
    alpha = np.zeros(100)
    alpha[10] = 0.5  # compressed token
    alpha[70] = 0.5
    cache.record_attention_scores(alpha)
    start, row = cache.heads[0].s_acc.rows[0]
    assert start == 64 and len(row) == 36 and row[6] == 0.5 and row.sum() == 0.5


def test_memory_bytes_matches_segments():
    cfg = SparsityConfig(0.7, 0.5)
    cache, _, _ = make_cache(300, d=128, config=cfg)
    head = cache.heads[0]
    mem = cache.memory_bytes()
    dense = bf.dense_bytes(head.dense_count, 128)
    assert mem["key"] == sum(bf.compressed_bytes(s) for s in head.segments_k) + dense
    assert mem["value"] == sum(bf.compressed_bytes(s) for s in head.segments_v) + dense
    assert cache.dense_bytes() == 2 * 300 * 128 * 2


def test_zero_sparsity_cache_charged_dense():
    cache, _, _ = make_cache(300, d=128, config=SparsityConfig(0.7, 0.0))
    assert cache.memory_bytes()["value"] == 300 * 128 * 2


def test_quantized_segments_on_half_grid():
    cache, _, _ = make_cache(100, d=64, config=SparsityConfig(0.5, 0.5), quant=QuantSpec(4))
    seg = cache.heads[0].segments_k[0]
    assert bf.is_half_exact(seg.values)
    assert seg.nnz <= 64 * 32


def snapshot_bytes(path):
    return (path / kv_cache.MANIFEST).read_bytes(), (path / kv_cache.SEGMENTS).read_bytes()


@pytest.mark.parametrize(
    "cfg",
    [
        SparsityConfig(0.7, 0.7),
        SparsityConfig(0.5, 0.5, "token_output_aware", "channel_output_aware"),
        SparsityConfig(0.5, 0.5, "two_of_four", "channel_magnitude"),
    ],
)
def test_dump_load_dump_identical(tmp_path, cfg):
    cache, _, _ = make_cache(150, config=cfg, shape=ModelShape(64, 2, 2))
    for i in range(30):
        append(cache, 7 + i)
        cache.record_attention_scores(np.full((2, cache.total_tokens), 1.0 / cache.total_tokens))
    a = kv_cache.dump(cache, tmp_path / "a", extra={"note": 1})
    loaded, extra = kv_cache.load(a)
    assert extra == {"note": 1}
    b = kv_cache.dump(loaded, tmp_path / "b", extra=extra)
    assert snapshot_bytes(a) == snapshot_bytes(b)
    for h0, h1 in zip(cache.heads, loaded.heads):
        assert h0.dense_k.tobytes() == h1.dense_k.tobytes()
        assert all(x == y for x, y in zip(h0.segments_v, h1.segments_v))
        np.testing.assert_array_equal(h0.q_acc.acc, h1.q_acc.acc)
    # the loaded cache keeps evolving identically
    for c in (cache, loaded):
        for i in range(40):
            append(c, 500 + i)
    assert bf.to_bytes(cache.heads[1].segments_k[-1]) == bf.to_bytes(loaded.heads[1].segments_k[-1])


def test_empty_cache_snapshot(tmp_path):
    cache = KVCache(SparsityConfig(), ModelShape(64))
    loaded, _ = kv_cache.load(kv_cache.dump(cache, tmp_path / "e"))
    assert loaded.total_tokens == 0 and loaded.regions().n_compressed == 0


def test_truncated_snapshot(tmp_path):
    cache, _, _ = make_cache(200)
    p = kv_cache.dump(cache, tmp_path / "t")
    seg = p / kv_cache.SEGMENTS
    seg.write_bytes(seg.read_bytes()[:-10])
    with pytest.raises(SnapshotError):
        kv_cache.load(p)


def test_truncated_manifest(tmp_path):
    cache, _, _ = make_cache(200)
    p = kv_cache.dump(cache, tmp_path / "t")
    m = p / kv_cache.MANIFEST
    m.write_text(m.read_text()[:50])
    with pytest.raises(SnapshotError):
        kv_cache.load(p)


def test_version_mismatch(tmp_path):
    cache, _, _ = make_cache(20)
    p = kv_cache.dump(cache, tmp_path / "v")
    m = json.loads((p / kv_cache.MANIFEST).read_text())
    m["version"] = 99
    (p / kv_cache.MANIFEST).write_text(json.dumps(m))
    with pytest.raises(SnapshotError, match="unsupported"):
        kv_cache.load(p)


def test_corrupt_segment_in_snapshot(tmp_path):
    cache, _, _ = make_cache(200)
    p = kv_cache.dump(cache, tmp_path / "c")
    raw = bytearray((p / kv_cache.SEGMENTS).read_bytes())
    raw[0:4] = b"ABCD"
    (p / kv_cache.SEGMENTS).write_bytes(bytes(raw))
    with pytest.raises(SnapshotError):
        kv_cache.load(p)


def test_missing_snapshot(tmp_path):
    with pytest.raises(SnapshotError):
        kv_cache.load(tmp_path / "nothing")


def test_dump_rejects_non_half_dense(tmp_path):
    cache = init_from_prefill(np.full((3, 64), 0.1), np.ones((3, 64)), SparsityConfig(), ModelShape(64))
    with pytest.raises(ValueError):
        kv_cache.dump(cache, tmp_path / "x")
