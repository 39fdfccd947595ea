"""Slow, obviously-correct reference implementations used by the tests."""
from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


# --- derivatives ------------------------------------------------------------

def central_difference(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    """d f / d x[idx] by central differences; ``x`` is modified in place and restored."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def relative_error(a, b, floor: float = 1e-10) -> float:
    """``|a - b| / max(|a|, |b|)``; differences below ``floor`` count as exact."""
    diff = abs(a - b)
    if diff < floor:
        return 0.0
    return diff / max(abs(a), abs(b))


# --- geometry ---------------------------------------------------------------

def law_of_cosines_km(a, b, radius=6371.0) -> float:
    (lat1, lon1), (lat2, lon2) = a, b
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return radius * math.acos(max(-1.0, min(1.0, c)))


# --- graphs -----------------------------------------------------------------

def _nbrs(adj):
    n = adj.shape[0]
    return [[j for j in range(n) if j != i and adj[i, j]] for i in range(n)]


def bfs_distances(adj, s):
    nb = _nbrs(adj)
    dist = {s: 0}
    q = deque([s])
    while q:
        v = q.popleft()
        for w in nb[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                q.append(w)
    return dist


def all_shortest_paths(adj, s, t):
    """Every shortest simple path from ``s`` to ``t`` by explicit enumeration."""
    nb = _nbrs(adj)
    dist = bfs_distances(adj, s)
    if t not in dist:
        return []
    paths = []

    def extend(path):
        v = path[-1]
        if v == t:
            paths.append(tuple(path))
            return
        for w in nb[v]:
            if dist.get(w) == dist[v] + 1 and w not in path:
                extend(path + [w])

    extend([s])
    return [p for p in paths if len(p) - 1 == dist[t]]


def betweenness_enum(adj):
    n = adj.shape[0]
    out = np.zeros(n)
    for s, t in itertools.combinations(range(n), 2):
        paths = all_shortest_paths(adj, s, t)
        if not paths:
            continue
        for v in range(n):
            if v in (s, t):
                continue
            out[v] += sum(v in p for p in paths) / len(paths)
    return out


def closeness_enum(adj):
    n = adj.shape[0]
    out = np.zeros(n)
    for s in range(n):
        total = sum(d for d in bfs_distances(adj, s).values())
        out[s] = 1.0 / total if total else 0.0
    return out


def clustering_enum(adj):
    n = adj.shape[0]
    nb = _nbrs(adj)
    out = np.zeros(n)
    for i in range(n):
        k = len(nb[i])
        if k < 2:
            continue
        links = sum(1 for a, b in itertools.combinations(nb[i], 2) if adj[a, b])
        out[i] = links / (k * (k - 1) / 2)
    return out


def degree_enum(adj):
    return np.array([len(x) for x in _nbrs(adj)], dtype=float)


def pagerank_dense(adj, alpha=0.85):
    """Solve ``(I - a M) pr = (1 - a)/N`` directly; dangling nodes spread uniformly."""
    n = adj.shape[0]
    a = np.array(adj, dtype=float)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=0)
    m = np.zeros((n, n))
    for j in range(n):
        if deg[j] > 0:
            m[:, j] = a[:, j] / deg[j]
        else:
            m[:, j] = 1.0 / n
    pr = np.linalg.solve(np.eye(n) - alpha * m, np.full(n, (1 - alpha) / n))
    return pr / pr.sum()


def random_graph(rng, n, p):
    a = (rng.random((n, n)) < p).astype(np.int8)
    a = np.triu(a, 1)
    a = a + a.T
    np.fill_diagonal(a, 1)
    return a


# --- trees and neighbours ---------------------------------------------------

def gini_brute(x, y, min_leaf=1):
    """Best Gini decrease over all thresholds between distinct sorted values, O(n^2)."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs, ys = np.asarray(x)[order], np.asarray(y, dtype=float)[order]

    def impurity(v):
        if len(v) == 0:
            return 0.0
        p = v.mean()
        return len(v) * 2 * p * (1 - p)

    parent = impurity(ys)
    best = 0.0
    for i in range(n - 1):
        if xs[i] == xs[i + 1] or i + 1 < min_leaf or n - i - 1 < min_leaf:
            continue
        best = max(best, parent - impurity(ys[:i + 1]) - impurity(ys[i + 1:]))
    return best


def knn_brute(X, k):
    n = X.shape[0]
    out = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        d = [(float(((X[i] - X[j]) ** 2).sum()), j) for j in range(n) if j != i]
        d.sort()
        out[i] = [j for _, j in d[:k]]
    return out


def f_beta_sweep(probs, labels, beta=2.0):
    """Threshold 0.01..0.99 maximising F-beta, first (lowest) on ties, by plain loops."""
    best_t, best = None, -1.0
    for i in range(1, 100):
        t = i / 100
        tp = fp = fn = 0
        for p, y in zip(probs, labels):
            pred = p >= t
            tp += pred and y
            fp += pred and not y
            fn += (not pred) and y
        den = (1 + beta ** 2) * tp + beta ** 2 * fn + fp
        score = (1 + beta ** 2) * tp / den if den else 0.0
        if score > best:
            best_t, best = t, score
    return best_t
