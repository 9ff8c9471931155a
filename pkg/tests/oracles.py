"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the package's numeric code, so agreement between
the two is evidence rather than tautology.
"""

import math

import numpy as np


def vec_mat(v, W):
    """Row vector times matrix with explicit loops."""
    out = [0.0] * len(W[0])
    for j in range(len(W[0])):
        s = 0.0
        for i in range(len(v)):
            s += v[i] * W[i][j]
        out[j] = s
    return out


def add(a, b):
    return [x + y for x, y in zip(a, b)]


def relu(v):
    return [x if x > 0 else 0.0 for x in v]


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def in_nbrs(n, edges, v):
    return sorted({int(s) for s, d, _ in edges if int(d) == v})


def mean_of(rows, width):
    if not rows:
        return [0.0] * width
    return [sum(r[j] for r in rows) / len(rows) for j in range(width)]


def encode(p, n_types, node_types, edges):
    """Two mean-aggregation layers, ReLU after the first only."""
    n = len(node_types)
    x = [[1.0 if t == int(node_types[i]) else 0.0 for t in range(n_types)] for i in range(n)]
    th1, b1, th2, b2 = (np.asarray(p[k]).tolist() for k in ("theta1", "b1", "theta2", "b2"))
    h1 = []
    for v in range(n):
        agg = mean_of([x[u] for u in in_nbrs(n, edges, v)], n_types)
        h1.append(relu(add(vec_mat(x[v] + agg, th1), b1)))
    H = len(b1)
    z = []
    for v in range(n):
        agg = mean_of([h1[u] for u in in_nbrs(n, edges, v)], H)
        z.append(add(vec_mat(h1[v] + agg, th2), b2))
    return z


def predict(p, zs, zd):
    ph1, c1, ph2, c2 = (np.asarray(p[k]).tolist() for k in ("phi1", "c1", "phi2", "c2"))
    hidden = relu(add(vec_mat(list(zs) + list(zd), ph1), c1))
    return [sigmoid(a) for a in add(vec_mat(hidden, ph2), c2)]


def bce_loss(p, n_types, node_types, edges, pos, neg, eps=1e-12):
    """Average of per-edge cross-entropies, one edge at a time."""
    z = encode(p, n_types, node_types, edges)
    total, count = 0.0, 0
    for label, group in ((1.0, pos), (0.0, neg)):
        for s, d, r in group:
            q = predict(p, z[int(s)], z[int(d)])[int(r)]
            q = min(max(q, eps), 1.0 - eps)
            total += -(label * math.log(q) + (1 - label) * math.log(1 - q))
            count += 1
    return total / count


def auc_pairs(pos, neg):
    """Mann-Whitney by counting every pair."""
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def rank_by_sort(probs, target, excluded=()):
    """1-based rank of ``target`` after sorting by (-prob, index)."""
    order = sorted((i for i in range(len(probs)) if i == target or i not in set(excluded)),
                   key=lambda i: (-probs[i], i))
    return order.index(target) + 1
