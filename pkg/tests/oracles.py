"""Independent reference computations used by the tests.

Each one is written straight from the definition, on raw lists, without
touching the package's own data structures.
"""
import math
import random


def similarity_bruteforce(pairs, i, j, degree=None):
    """Log-dampened co-occurrence similarity from raw (user, item) pairs.

    ``degree`` (user -> number of distinct items) may be passed in to avoid
    recounting it for every pair; it is derived from ``pairs`` otherwise.
    """
    pairs = set(pairs)
    if degree is None:
        degree = user_degrees(pairs)
    users_i = [a for a, it in pairs if it == i]
    users_j = [a for a, it in pairs if it == j]
    if not users_i or not users_j:
        return 0.0
    total = 0.0
    for a in users_i:
        if a in users_j:
            total += 1.0 / math.log(1.0 + degree[a])
    return total / math.sqrt(len(users_i) * len(users_j))


def user_degrees(pairs):
    deg = {}
    for a, _ in set(pairs):
        deg[a] = deg.get(a, 0) + 1
    return deg


def random_bipartite(seed, max_users=20, max_items=20):
    r = random.Random(seed)
    n_u, n_i = r.randint(1, max_users), r.randint(2, max_items)
    density = r.random()
    return [(a, i) for a in range(n_u) for i in range(n_i) if r.random() < density], n_u, n_i


def auc_pairwise(scores, labels):
    """O(n^2) AUC: fraction of positive/negative pairs ranked correctly, ties half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    hits = 0.0
    for p in pos:
        for n in neg:
            hits += 1.0 if p > n else 0.5 if p == n else 0.0
    return hits / (len(pos) * len(neg))
