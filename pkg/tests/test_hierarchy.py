import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierexplain.hierarchy import HierarchyError, HierarchyTree, UnknownNodeError

from conftest import random_tree


def all_simple_paths(tree, a, b):
    """Brute-force DFS over the undirected tree graph."""
    adj = {u: tree.neighbors(u) for u in tree.nodes}
    out = []

    def walk(u, seen):
        if u == b:
            out.append(list(seen))
            return
        for v in adj[u]:
            if v not in seen:
                walk(v, seen + [v])

    walk(a, [a])
    return out


def test_path_chain(chain3):
    assert chain3.path(0, 2) == [0, 1, 2]
    assert chain3.path(2, 0) == [2, 1, 0]


def test_path_identity(five_node):
    assert five_node.path(3, 3) == [3]


def test_path_cross_branch_matches_enumeration(five_node):
    assert five_node.path(3, 4) == [3, 1, 0, 2, 4]
    assert all_simple_paths(five_node, 3, 4) == [[3, 1, 0, 2, 4]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_path_unique_simple_path(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, max_nodes=25)
    a, b = (int(x) for x in rng.integers(tree.n_nodes, size=2))
    assert [tree.path(a, b)] == all_simple_paths(tree, a, b)


def test_lca_cases(five_node):
    assert five_node.lca({3}) == 3
    t = HierarchyTree([None, 0, 1, 1])
    assert t.lca({2, 3}) == 1
    assert five_node.lca({3, 4}) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_lca_against_ancestor_sets(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, max_nodes=40)
    k = int(rng.integers(1, min(5, tree.n_nodes) + 1))
    nodes = [int(x) for x in rng.choice(tree.n_nodes, size=k, replace=False)]
    common = set.intersection(*({n, *tree.ancestors(n)} for n in nodes))
    expected = max(common, key=tree.level)
    assert tree.lca(nodes) == expected


def test_lca_empty_raises(five_node):
    with pytest.raises(HierarchyError):
        five_node.lca([])


def test_unknown_node_error(five_node):
    with pytest.raises(UnknownNodeError) as exc:
        five_node.path(0, 99)
    assert exc.value.node == 99
    assert "99" in str(exc.value)


@pytest.mark.parametrize("parent", [[None, None], [0, 0], [None, 2, 1], [None, 5]])
def test_invalid_trees_rejected(parent):
    with pytest.raises(HierarchyError):
        HierarchyTree(parent)


def test_non_finite_weight_rejected():
    with pytest.raises(HierarchyError):
        HierarchyTree([None, 0], {(0, 1): float("nan")})


def test_levels_consistent():
    tree = HierarchyTree.balanced(3, 4)
    for p, c in tree.edges:
        assert tree.level(c) == tree.level(p) + 1
        assert c in tree.children(p) and tree.parent(c) == p
    assert tree.n_nodes == 1 + 3 + 9 + 27


def test_aggregate_plain_sum():
    tree = HierarchyTree([None, 0, 0])
    out = tree.aggregate_up({1: [1, 2], 2: [3, 4]})
    assert out[0].tolist() == [4, 6]


def test_aggregate_weighted_mean():
    tree = HierarchyTree([None, 0, 0], {(0, 1): 0.5, (0, 2): 0.5})
    out = tree.aggregate_up({1: [2, 2], 2: [4, 6]})
    assert out[0].tolist() == [3, 4]


def test_aggregate_root_is_path_weighted_leaf_sum():
    rng = np.random.default_rng(1)
    parent = [None, 0, 0, 1, 1, 2, 2]
    phi = {(p, c): float(rng.uniform(0.2, 2.0)) for c, p in enumerate(parent) if p is not None}
    tree = HierarchyTree(parent, phi)
    leaves = {leaf: rng.normal(size=5) for leaf in tree.leaves}
    out = tree.aggregate_up(leaves)
    # brute force: multiply weights along each leaf's path to the root
    direct = np.zeros(5)
    for leaf, series in leaves.items():
        w, u = 1.0, leaf
        while parent[u] is not None:
            w *= phi[(parent[u], u)]
            u = parent[u]
        direct += w * series
    np.testing.assert_allclose(out[0], direct, rtol=1e-12)


def test_aggregate_length_mismatch():
    tree = HierarchyTree([None, 0, 0])
    with pytest.raises(HierarchyError):
        tree.aggregate_up({1: [1, 2], 2: [3]})


def test_coherency_residual_cases():
    tree = HierarchyTree.balanced(2, 3)
    rng = np.random.default_rng(2)
    vals = tree.aggregate_up({leaf: rng.normal(size=6) for leaf in tree.leaves})
    assert tree.coherency_residual(vals) <= 1e-9
    vals[1] = vals[1] + 1.0
    assert tree.coherency_residual(vals) == pytest.approx(1.0)


def test_coherency_residual_matches_hand_sum():
    tree = HierarchyTree.balanced(2, 3)
    rng = np.random.default_rng(3)
    arr = rng.normal(size=(tree.n_nodes, 7))
    worst = 0.0
    for u in tree.nodes:
        if tree.children(u):
            s = sum(arr[c] for c in tree.children(u))
            worst = max(worst, float(np.max(np.abs(arr[u] - s))))
    assert tree.coherency_residual(arr) == pytest.approx(worst, rel=1e-12)


def test_summing_matrix_reproduces_aggregation():
    tree = HierarchyTree([None, 0, 0, 1, 1], {(0, 1): 2.0, (1, 3): 0.5})
    S = tree.summing_matrix()
    leaves = {leaf: np.array([float(i + 1)]) for i, leaf in enumerate(tree.leaves)}
    agg = tree.aggregate_up(leaves)
    vec = np.array([leaves[leaf][0] for leaf in tree.leaves])
    np.testing.assert_allclose(S @ vec, [agg[u][0] for u in tree.nodes])


def test_roundtrip_json(tmp_path):
    tree = HierarchyTree([None, 0, 0, 2], {(0, 2): 0.25}, names=["r", "a", "b", "c"])
    path = tmp_path / "h.json"
    tree.save(path)
    json.loads(path.read_text())
    assert HierarchyTree.load(path) == tree


def test_immutable_children(five_node):
    with pytest.raises((TypeError, AttributeError)):
        five_node.children(0).append(9)
