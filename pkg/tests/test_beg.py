import math

import numpy as np
import pytest

from cometa_lab.beg import (NeighborList, UnindexedItemError, base_embedding, build_index, dump_neighbors,
                            read_neighbors, similarity, top_k_from_users, top_k_neighbors)

from oracles import random_bipartite, similarity_bruteforce


def idx_from(pairs):
    return build_index([a for a, _ in pairs], [i for _, i in pairs])


def test_index_set_semantics():
    idx = idx_from([(0, 1)])
    assert idx.users_of(1) == {0} and idx.user_items[0] == {1}
    assert idx_from([(0, 1), (0, 1)]).users_of(1) == {0}
    full = idx_from([(a, i) for a in range(3) for i in range(3)])
    assert all(len(full.users_of(i)) == 3 for i in range(3))
    assert all(len(full.user_items[a]) == 3 for a in range(3))


def test_positive_only_filter():
    idx = build_index([0, 1], [5, 5], labels=[1, 0])
    assert idx.users_of(5) == {0}
    assert build_index([0, 1], [5, 5], labels=[1, 0], positive_only=False).users_of(5) == {0, 1}


def test_unindexed_item():
    with pytest.raises(UnindexedItemError):
        similarity(idx_from([(0, 1)]), 1, 9)


def test_disjoint_users_zero():
    assert similarity(idx_from([(0, 1), (1, 2)]), 1, 2) == 0.0


def test_hand_example():
    # a -> {i, j}, b -> {i}: (1 / ln 3) / sqrt(2)
    idx = idx_from([(0, 10), (0, 11), (1, 10)])
    assert similarity(idx, 10, 11) == pytest.approx(1 / math.log(3) / math.sqrt(2), abs=1e-15)
    assert round(similarity(idx, 10, 11), 4) == 0.6436


def test_matches_bruteforce_on_random_graphs():
    for seed in range(60):
        pairs, _, n_i = random_bipartite(seed)
        idx = idx_from(pairs)
        for i in idx.item_users:
            for j in idx.item_users:
                assert abs(similarity(idx, i, j) - similarity_bruteforce(pairs, i, j)) < 1e-12


def test_alpha_arithmetic():
    # item 0 shares user 0 with item 1 and user 1 with item 2; tune so sims are 3:1
    idx = idx_from([(0, 0), (0, 1), (1, 0), (1, 2)])
    nl = top_k_neighbors(idx, 0, [1, 2], k=8)
    s1, s2 = similarity(idx, 0, 1), similarity(idx, 0, 2)
    np.testing.assert_allclose(nl.alphas, [s1 / (s1 + s2), s2 / (s1 + s2)][: len(nl)])
    fixed = NeighborList(0, [1, 2], [0.6, 0.2], [])
    z = sum(fixed.sims)
    assert [s / z for s in fixed.sims] == pytest.approx([0.75, 0.25])


def test_two_neighbors_point_six_and_point_two():
    # a query with users {0,1,2,3}; neighbor 5 shares 3 damped users, 6 shares 1
    pairs = [(u, 5) for u in (0, 1, 2)] + [(3, 6)]
    idx = idx_from(pairs)
    nl = top_k_from_users(idx, 99, {0, 1, 2, 3}, {5, 6}, k=8)
    s5 = 3 / math.log(2) / math.sqrt(4 * 3)
    s6 = 1 / math.log(2) / math.sqrt(4 * 1)
    assert nl.neighbors == [5, 6]
    assert nl.alphas == pytest.approx([s5 / (s5 + s6), s6 / (s5 + s6)])


def test_singleton_neighbor_alpha_one():
    idx = idx_from([(0, 1), (0, 2)])
    nl = top_k_neighbors(idx, 1, [2], k=8)
    assert nl.neighbors == [2] and nl.alphas == [1.0]


def test_truncation_and_self_exclusion():
    idx = idx_from([(0, i) for i in range(5)])
    nl = top_k_neighbors(idx, 0, range(5), k=100)
    assert len(nl) == 4 and 0 not in nl.neighbors
    assert len(top_k_neighbors(idx, 0, range(5), k=2)) == 2


def test_ties_broken_by_ascending_id():
    idx = idx_from([(0, i) for i in (7, 3, 9, 1)])
    assert top_k_neighbors(idx, 7, [3, 9, 1], k=2).neighbors == [1, 3]


def test_weight_simplex_and_log_base_invariance():
    for seed in range(40):
        pairs, _, n_i = random_bipartite(seed + 1000)
        idx = idx_from(pairs)
        for i in idx.item_users:
            a = top_k_neighbors(idx, i, idx.item_users, k=5)
            b = top_k_neighbors(idx, i, idx.item_users, k=5, log=math.log2)
            assert a.neighbors == b.neighbors
            np.testing.assert_allclose(a.alphas, b.alphas, rtol=0, atol=1e-12)
            if len(a):
                assert min(a.alphas) >= 0 and abs(sum(a.alphas) - 1) < 1e-9


def test_popular_user_counts_less():
    # user 0 touched many items, user 1 only two: sharing user 1 gives more similarity
    pairs = [(0, i) for i in range(10)] + [(1, 20), (1, 21), (0, 20), (0, 22)]
    idx = idx_from(pairs)
    assert similarity(idx, 20, 21) > similarity(idx, 20, 22)


def test_base_embedding_examples():
    table = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    nl = NeighborList(9, [0, 1], [0.1, 0.3], [0.25, 0.75])
    np.testing.assert_allclose(base_embedding(nl, table), [0.25, 0.75])
    np.testing.assert_array_equal(base_embedding(NeighborList(9, [2], [0.4], [1.0]), table), [3.0, 3.0])
    same = np.tile([[2.0, -1.0]], (3, 1))
    np.testing.assert_allclose(base_embedding(NeighborList(9, [0, 1, 2], [1, 1, 1], [0.2, 0.3, 0.5]), same),
                               [2.0, -1.0])
    assert base_embedding(NeighborList(9), table) is None
    with pytest.raises(IndexError):
        base_embedding(NeighborList(9, [5], [1.0], [1.0]), table)


def test_dump_round_trip(tmp_path):
    idx = idx_from([(0, 1), (0, 2), (1, 1), (1, 3)])
    lists = [top_k_neighbors(idx, i, [1, 2, 3]) for i in (1, 2, 3)]
    dump_neighbors(lists, tmp_path / "n.tsv")
    back = read_neighbors(tmp_path / "n.tsv")
    assert [b.neighbors for b in back] == [a.neighbors for a in lists]
    np.testing.assert_allclose([x for b in back for x in b.alphas], [x for a in lists for x in a.alphas])
