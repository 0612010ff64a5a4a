import numpy as np
import pytest

from specdec.attention import (AttentionError, CausalPrefix, LocalChunk,
                               TreeSuffix, attend, explicit_tree_mask,
                               merge_attentions, merge_partials,
                               naive_tree_attention, tree_attention,
                               truncate_draft_at_boundary)
from specdec.drafttree import ROOT, TreeSpec, build_chain, parse_tree


def _softmax_ref(q, k, v, mask, scale):
    s = (q @ k.T) * scale
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p @ v


def test_attend_causal_prefix_matches_reference():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(3, 8)) for _ in range(3))
    got = attend(q, k, v, CausalPrefix(3), 0.5).out
    np.testing.assert_allclose(got, _softmax_ref(q, k, v, None, 0.5), atol=1e-12)


def test_attend_local_chunk_blocks_cross_chunk_keys():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(1, 4))
    k, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    # query at position 5, chunk 4: only keys at positions 4..5 visible
    bias = LocalChunk(4, (5,), tuple(range(6)))
    got = attend(q, k, v, bias, 1.0).out
    mask = np.zeros((1, 6), dtype=bool)
    mask[0, 4:6] = True
    np.testing.assert_allclose(got, _softmax_ref(q, k, v, mask, 1.0), atol=1e-12)


def test_attend_empty_keys_is_fully_masked():
    part = attend(np.ones((2, 4)), np.zeros((0, 4)), np.zeros((0, 4)),
                  CausalPrefix(0), 1.0)
    assert part.masked_rows.all()


def test_merge_equals_joint_attention():
    # attention over a split key set merges back to the joint result
    rng = np.random.default_rng(2)
    q = rng.normal(size=(4, 8))
    k, v = rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
    for cut in (1, 3, 7, 9):
        a = attend(q, k[:cut], v[:cut], CausalPrefix(cut), 0.3)
        b = attend(q, k[cut:], v[cut:], CausalPrefix(10 - cut), 0.3)
        merged = merge_attentions([a, b])
        joint = attend(q, k, v, CausalPrefix(10), 0.3).out
        np.testing.assert_allclose(merged, joint, atol=1e-10)


def test_merge_multi_head():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(2, 8))
    k, v = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    a = attend(q, k[:2], v[:2], CausalPrefix(2), 1.0, n_heads=2)
    b = attend(q, k[2:], v[2:], CausalPrefix(4), 1.0, n_heads=2)
    joint = attend(q, k, v, CausalPrefix(6), 1.0, n_heads=2).out
    np.testing.assert_allclose(merge_attentions([a, b], n_heads=2), joint,
                               atol=1e-10)


def test_merge_rejects_all_masked_row():
    part = attend(np.ones((1, 4)), np.zeros((0, 4)), np.zeros((0, 4)),
                  CausalPrefix(0), 1.0)
    with pytest.raises(AttentionError):
        merge_partials([part, part])


def test_merge_ignores_masked_part_when_other_covers():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(1, 4))
    k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    covered = attend(q, k, v, CausalPrefix(3), 1.0)
    empty = attend(q, np.zeros((0, 4)), np.zeros((0, 4)), CausalPrefix(0), 1.0)
    np.testing.assert_allclose(merge_attentions([covered, empty]), covered.out,
                               atol=1e-12)


def test_tree_attention_vs_naive_randomized():
    rng = np.random.default_rng(5)
    for case in range(40):
        n_nodes = int(rng.integers(1, 17))
        parent = [ROOT]
        for i in range(1, n_nodes):
            parent.append(int(rng.integers(0, i)) if rng.random() < 0.8 else ROOT)
        tree = TreeSpec(tuple(parent))
        ctx = int(rng.integers(0, 65))
        heads = int(rng.choice([1, 2, 4]))
        dh = int(rng.choice([4, 8]))
        dim = heads * dh
        chunk = None if case % 2 == 0 else int(rng.choice([4, 8]))
        q = rng.normal(size=(n_nodes, dim))
        ck, cv = rng.normal(size=(ctx, dim)), rng.normal(size=(ctx, dim))
        tk, tv = rng.normal(size=(n_nodes, dim)), rng.normal(size=(n_nodes, dim))
        scale = dh ** -0.5
        got = tree_attention(q, ck, cv, tk, tv, tree, scale, n_heads=heads,
                             chunk_len=chunk)
        mask = explicit_tree_mask(tree, ctx, chunk_len=chunk)
        want = naive_tree_attention(q, np.concatenate([ck, tk]),
                                    np.concatenate([cv, tv]), mask, scale,
                                    n_heads=heads)
        assert np.max(np.abs(got - want)) < 1e-5


def test_explicit_tree_mask_chain():
    t = build_chain(2)
    m = explicit_tree_mask(t, 3)
    # node 0 sees context + itself; node 1 also sees node 0
    np.testing.assert_array_equal(m[0], [True, True, True, True, False])
    np.testing.assert_array_equal(m[1], [True, True, True, True, True])


def test_truncate_keeps_nodes_inside_chunk():
    t = parse_tree("full:3,2")  # depths 1..3
    # committed_len 6, chunk 8: boundary at 8, node positions 6..8
    tt = truncate_draft_at_boundary(t, 6, 8)
    assert tt.max_depth == 2
    # at the boundary itself nothing fits
    assert truncate_draft_at_boundary(t, 8, 8).n_nodes == 0
    # chunk_len None is a no-op
    assert truncate_draft_at_boundary(t, 6, None) is t


def test_tree_suffix_requires_matching_shape():
    with pytest.raises(AttentionError):
        attend(np.ones((2, 4)), np.ones((3, 4)), np.ones((3, 4)),
               TreeSuffix(np.ones((2, 2), dtype=bool)), 1.0)
