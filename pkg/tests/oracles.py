"""Straight-line reference implementations used to cross-check the package.

Deliberately written with plain loops and no shared helpers.
"""

import math
from fractions import Fraction


def rank_pool(scores: dict, pool):
    """Pool ids sorted by (-score, id)."""
    return sorted(pool, key=lambda i: (-scores[i], i))


def accuracy_at_k(test_clicks, score_of, pool, k):
    hits = 0
    for user, item in test_clicks:
        scores = {i: score_of(user, i) for i in pool}
        if item in rank_pool(scores, pool)[:k]:
            hits += 1
    return hits / len(test_clicks)


def top_lists(users, score_of, pool, k):
    out = {}
    for u in users:
        scores = {i: score_of(u, i) for i in pool}
        out[u] = rank_pool(scores, pool)[:k]
    return out


def coverage(lists, test_items):
    seen = set()
    for lst in lists.values():
        for i in lst:
            if i in test_items:
                seen.add(i)
    return 100.0 * len(seen) / len(test_items)


def ecs(lists, k):
    counts = {}
    total = 0
    for lst in lists.values():
        for i in lst[:k]:
            counts[i] = counts.get(i, 0) + 1
            total += 1
    # exact rational arithmetic, rounded once at the end
    shares = sorted((Fraction(c, total) for c in counts.values()), reverse=True)
    acc = Fraction(0)
    for rank, p in enumerate(shares, start=1):
        acc += rank * p
    return float(2 * acc - 1)


def visual_diversity(lists, features):
    per_user = []
    for lst in lists.values():
        if len(lst) < 2:
            continue
        vecs = []
        for i in lst:
            v = list(features[i])
            norm = math.sqrt(sum(x * x for x in v))
            vecs.append([x / norm for x in v])
        dists = []
        for a in range(len(vecs)):
            for b in range(a + 1, len(vecs)):
                dists.append(math.sqrt(sum((x - y) ** 2 for x, y in zip(vecs[a], vecs[b]))))
        per_user.append(sum(dists) / len(dists))
    return sum(per_user) / len(per_user)


def average_precision(ranked, relevant, cutoff=1000):
    found = 0
    precisions = []
    for pos, item in enumerate(ranked[:cutoff], start=1):
        if item in relevant:
            found += 1
            precisions.append(found / pos)
    return sum(precisions) / len(relevant)


def mean_average_precision(lists, relevance):
    total = sum(Fraction(average_precision(l, r)) for l, r in zip(lists, relevance))
    return float(total) / len(lists)


def cross_layer(x0, x, U, V, b):
    """x0 * (U V^T x + b) + x with explicit loops."""
    d, r = len(U), len(U[0])
    h = [sum(V[i][j] * x[i] for i in range(d)) for j in range(r)]
    return [x0[i] * (sum(U[i][j] * h[j] for j in range(r)) + b[i]) + x[i] for i in range(d)]


def fnv1a_64(data: bytes) -> int:
    h = 14695981039346656037
    for c in data:
        h = ((h ^ c) * 1099511628211) % 2 ** 64
    return h


def symmetric_ce(S):
    n = len(S)
    total = 0.0
    for i in range(n):
        m = max(S[i])
        lse = m + math.log(sum(math.exp(v - m) for v in S[i]))
        total += (lse - S[i][i]) / (2 * n)
    for j in range(n):
        col = [S[i][j] for i in range(n)]
        m = max(col)
        lse = m + math.log(sum(math.exp(v - m) for v in col))
        total += (lse - S[j][j]) / (2 * n)
    return total


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar f over every entry of numpy array x (modified in place, restored)."""
    import numpy as np

    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    """||a - b|| / max(||a||, ||b||, floor); the floor keeps all-but-zero gradients from
    turning rounding noise into a large relative error."""
    import numpy as np

    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
