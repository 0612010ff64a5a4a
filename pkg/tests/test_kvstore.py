import numpy as np
import pytest

from specdec.kvstore import (CacheError, FlatKvCache, HiddenTape, PagedKvCache,
                             PersistentKvStore, block_keys,
                             draft_cache_capacity, evict_lru, lookup_prefix)


def _fill(cache, seq, n, rng):
    rows = [(rng.normal(size=(n, cache.dim)), rng.normal(size=(n, cache.dim)))
            for _ in range(cache.n_layers)]
    cache.ensure(seq, n)
    for layer, (k, v) in enumerate(rows):
        cache.write(seq, layer, 0, k, v)
    cache.set_len(seq, n)
    return rows


def test_block_keys_prefix_property():
    a = [1, 2, 3, 4, 5, 6, 7, 8]
    b = a[:4] + [9, 9, 9, 9]
    ka, kb = block_keys(a, 4), block_keys(b, 4)
    assert ka[0] == kb[0] and ka[1] != kb[1]
    # keys chain: same block content under a different prefix differs
    c = [0] + a[1:]
    assert block_keys(c, 4)[1] != ka[1]
    # partial trailing block is not keyed
    assert len(block_keys(a[:6], 4)) == 1


def test_paged_matches_flat_gather():
    rng = np.random.default_rng(0)
    paged = PagedKvCache(2, 8, n_blocks=16, block_size=4)
    flat = FlatKvCache(2, 8, max_len=64)
    for c in (paged, flat):
        c.new_seq(0)
    rows = _fill(paged, 0, 11, np.random.default_rng(1))
    flat.ensure(0, 11)
    for layer, (k, v) in enumerate(rows):
        flat.write(0, layer, 0, k, v)
    flat.set_len(0, 11)
    for layer in range(2):
        kp, vp = paged.gather(0, layer, 11)
        kf, vf = flat.gather(0, layer, 11)
        np.testing.assert_array_equal(kp, kf)
        np.testing.assert_array_equal(vp, vf)


def test_write_spanning_blocks_round_trips():
    rng = np.random.default_rng(2)
    cache = PagedKvCache(1, 4, n_blocks=8, block_size=4)
    cache.new_seq(0)
    cache.ensure(0, 10)
    k = rng.normal(size=(10, 4))
    v = rng.normal(size=(10, 4))
    cache.write(0, 0, 0, k, v)
    cache.set_len(0, 10)
    gk, gv = cache.gather(0, 0, 10)
    np.testing.assert_array_equal(gk, k)
    np.testing.assert_array_equal(gv, v)
    # offset write into the middle of the sequence
    cache.write(0, 0, 6, k[:3], v[:3])
    gk, _ = cache.gather(0, 0, 10)
    np.testing.assert_array_equal(gk[6:9], k[:3])


def test_rewind_drops_written_tail():
    cache = PagedKvCache(1, 4, n_blocks=8, block_size=4)
    cache.new_seq(0)
    _fill(cache, 0, 10, np.random.default_rng(3))
    cache.rewind(0, 6)
    assert cache.written_len(0) == 6
    cache.set_len(0, 7)
    assert cache.committed_len(0) == 7
    with pytest.raises(CacheError):
        cache.gather(0, 0, 10)


def test_pool_exhaustion_raises_without_evictables():
    cache = PagedKvCache(1, 4, n_blocks=2, block_size=4)
    cache.new_seq(0)
    with pytest.raises(CacheError):
        cache.ensure(0, 12)


def test_release_parks_then_eviction_fills_store():
    rng = np.random.default_rng(4)
    store = PersistentKvStore(8)
    cache = PagedKvCache(1, 4, n_blocks=4, block_size=4, store=store)
    cache.new_seq(0)
    _fill(cache, 0, 8, rng)
    keys = block_keys(list(range(8)), 4)
    cache.release(0, keys)
    assert cache.evictable_blocks == 2
    evicted = evict_lru(cache, store, 2)
    assert evicted == list(keys)
    assert set(store.keys()) == set(keys)
    assert cache.free_blocks == 4


def test_lookup_prefix_restores_exact_payload():
    rng = np.random.default_rng(5)
    store = PersistentKvStore(8)
    cache = PagedKvCache(1, 4, n_blocks=8, block_size=4, store=store)
    tokens = list(range(8))
    cache.new_seq(0)
    rows = _fill(cache, 0, 8, rng)
    keys = block_keys(tokens, 4)
    cache.release(0, keys)
    evict_lru(cache, store, 2)

    cache.new_seq(1)
    matched = lookup_prefix(cache, store, 1, tokens + [99])
    assert matched == 8
    gk, gv = cache.gather(1, 0, 8)
    np.testing.assert_array_equal(gk, rows[0][0])
    np.testing.assert_array_equal(gv, rows[0][1])


def test_lookup_prefix_partial_match():
    rng = np.random.default_rng(6)
    cache = PagedKvCache(1, 4, n_blocks=8, block_size=4)
    tokens = list(range(8))
    cache.new_seq(0)
    _fill(cache, 0, 8, rng)
    cache.release(0, block_keys(tokens, 4))
    cache.new_seq(1)
    # first block matches, second diverges
    matched = lookup_prefix(cache, None, 1, tokens[:4] + [7, 7, 7, 7])
    assert matched == 4


def test_store_capacity_evicts_oldest():
    store = PersistentKvStore(2)
    for i in range(3):
        store.put(f"k{i}", np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    assert store.keys() == ["k1", "k2"]
    assert store.pop("k0") is None


def test_draft_capacity_matches_base():
    assert draft_cache_capacity(64, 4, 1) == 64


def test_hidden_tape_rows_and_truncate():
    tape = HiddenTape(dim=3)
    tape.append_rows(np.arange(6, dtype=float).reshape(2, 3))
    assert len(tape) == 2
    np.testing.assert_array_equal(tape.last(), [3.0, 4.0, 5.0])
    np.testing.assert_array_equal(tape.slice(0, 2)[0], [0.0, 1.0, 2.0])
    tape.truncate(1)
    assert len(tape) == 1
    with pytest.raises(CacheError):
        tape.get(1)


def test_hidden_tape_offset_guards_discarded_rows():
    tape = HiddenTape(dim=2, offset=3)
    tape.append_rows(np.ones((1, 2)))
    assert len(tape) == 4
    with pytest.raises(CacheError):
        tape.get(2)
    with pytest.raises(CacheError):
        tape.truncate(2)
