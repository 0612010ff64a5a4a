import numpy as np
import pytest

from specdec.drafttree import (EMPTY_TREE, ROOT, DispatchTable, TreeError,
                               TreeSpec, build_chain, build_full_tree,
                               dispatch, parse_tree, paths, subtree,
                               suffix_mask)


def test_chain_shape():
    t = build_chain(4)
    assert t.parent == (ROOT, 0, 1, 2)
    assert t.depth == (1, 2, 3, 4)
    assert t.max_depth == 4


def test_full_tree_counts():
    t = build_full_tree(2, 3)
    # 3 roots, 9 grandchildren
    assert t.n_nodes == 12
    assert t.depth.count(1) == 3 and t.depth.count(2) == 9


def test_full_tree_node_cap():
    with pytest.raises(TreeError):
        build_full_tree(8, 4, max_nodes=100)


def test_parent_must_precede_child():
    with pytest.raises(TreeError):
        TreeSpec((ROOT, 2, 1))
    with pytest.raises(TreeError):
        TreeSpec((0,))


def test_parse_tree_forms():
    assert parse_tree("chain:3").parent == (ROOT, 0, 1)
    assert parse_tree("full:2,2").n_nodes == 6
    t = parse_tree("nodes:[-1,-1,0,0,1,2,2,5]")
    assert t.n_nodes == 8
    assert t.parent == (ROOT, ROOT, 0, 0, 1, 2, 2, 5)
    with pytest.raises(TreeError):
        parse_tree("ladder:9")


def test_children_ordered():
    t = parse_tree("nodes:[-1,-1,0,0]")
    assert t.children(ROOT) == [0, 1]
    assert t.children(0) == [2, 3]
    assert t.children(1) == []


def test_suffix_mask_is_ancestor_closure():
    t = parse_tree("full:2,2")
    m = suffix_mask(t)
    for i in range(t.n_nodes):
        expect = np.zeros(t.n_nodes, dtype=bool)
        expect[t.ancestors_or_self(i)] = True
        np.testing.assert_array_equal(m[i], expect)
    # lower triangular since parents precede children
    assert not np.triu(m, 1).any()


def test_paths_cover_leaves():
    t = parse_tree("nodes:[-1,-1,0,0,1]")
    got = paths(t)
    assert got == [[0, 2], [0, 3], [1, 4]]


def test_subtree_reindexes():
    t = parse_tree("full:2,2")
    sub, remap = subtree(t, [0, 2, 3])
    assert sub.parent == (ROOT, 0, 0)
    assert remap == {0: 0, 2: 1, 3: 2}


def test_empty_tree():
    assert EMPTY_TREE.n_nodes == 0
    assert EMPTY_TREE.max_depth == 0


def test_dispatch_thresholds():
    small, big = parse_tree("full:2,2"), parse_tree("chain:3")
    table = DispatchTable(((8, small), (None, big)))
    assert dispatch(table, 1) is small
    assert dispatch(table, 8) is small
    assert dispatch(table, 9) is big
    with pytest.raises(TreeError):
        DispatchTable(((8, small), (4, big)))
    with pytest.raises(TreeError):
        DispatchTable(())
