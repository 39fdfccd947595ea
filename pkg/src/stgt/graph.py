"""Proximity graph between substations and its centrality descriptors.

Two substations are linked when their great-circle distance is strictly below a
threshold ``tau`` (kilometres). The adjacency keeps ``A[i, i] = 1`` because the
spatial attention layer needs a node to see itself; every centrality here is
computed on the graph *without* self-loops.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError

EARTH_RADIUS_KM = 6371.0
DEFAULT_TAU_KM = 50.0
TOPO_NAMES = ("degree", "betweenness", "closeness", "pagerank", "clustering")


def _check_coord(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ValidationError("coordinates must be finite")
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise ValidationError("latitude must lie in [-90, 90] and longitude in [-180, 180]")


def great_circle_km(a, b) -> float:
    """Haversine distance in km between ``(lat, lon)`` pairs given in degrees."""
    (lat1, lon1), (lat2, lon2) = a, b
    _check_coord([lat1, lat2], [lon1, lon2])
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def pairwise_km(coords) -> np.ndarray:
    """All-pairs haversine distances for an ``(n, 2)`` array of lat/lon degrees."""
    coords = np.asarray(coords, dtype=float)
    _check_coord(coords[:, 0], coords[:, 1])
    lat = np.radians(coords[:, 0])[:, None]
    lon = np.radians(coords[:, 1])[:, None]
    h = (np.sin((lat - lat.T) / 2) ** 2
         + np.cos(lat) * np.cos(lat.T) * np.sin((lon - lon.T) / 2) ** 2)
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class GridGraph:
    coords: np.ndarray       # (n, 2) lat/lon degrees
    adjacency: np.ndarray    # (n, n) int8, symmetric, unit diagonal
    tau: float
    ids: tuple = ()

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def simple(self) -> np.ndarray:
        """Adjacency with self-loops removed, as booleans."""
        a = self.adjacency.astype(bool)
        np.fill_diagonal(a, False)
        return a

    def neighbors(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.simple[s])

    def edges(self):
        """Undirected edges ``(i, j)`` with ``i < j``."""
        i, j = np.nonzero(np.triu(self.simple, k=1))
        return list(zip(i.tolist(), j.tolist()))


def build_adjacency(coords, tau: float = DEFAULT_TAU_KM, ids=()) -> GridGraph:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
        raise ValidationError("need an (n >= 2, 2) array of lat/lon coordinates")
    if not tau > 0:
        raise ValidationError("tau must be positive")
    a = (pairwise_km(coords) < tau).astype(np.int8)
    np.fill_diagonal(a, 1)
    return GridGraph(coords=coords, adjacency=a, tau=float(tau), ids=tuple(ids))


def graph_from_adjacency(adjacency, coords=None, tau=float("nan"), ids=()) -> GridGraph:
    """Wrap an explicit 0/1 adjacency (diagonal forced to 1)."""
    a = np.asarray(adjacency).astype(np.int8)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("adjacency must be square")
    if not np.array_equal(a, a.T) or not np.isin(a, (0, 1)).all():
        raise ValidationError("adjacency must be symmetric with 0/1 entries")
    a = a.copy()
    np.fill_diagonal(a, 1)
    if coords is None:
        coords = np.zeros((a.shape[0], 2))
    return GridGraph(coords=np.asarray(coords, dtype=float), adjacency=a, tau=tau, ids=tuple(ids))


# --- centralities -----------------------------------------------------------

def _bfs(nbrs, s):
    """Distances, shortest-path counts, predecessors and visit order from ``s``."""
    n = len(nbrs)
    dist = [-1] * n
    sigma = [0.0] * n
    preds = [[] for _ in range(n)]
    order = []
    dist[s] = 0
    sigma[s] = 1.0
    queue = deque([s])
    while queue:
        v = queue.popleft()
        order.append(v)
        for w in nbrs[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                queue.append(w)
            if dist[w] == dist[v] + 1:
                sigma[w] += sigma[v]
                preds[w].append(v)
    return dist, sigma, preds, order


def _neighbor_lists(g: GridGraph):
    simple = g.simple
    return [np.flatnonzero(simple[i]).tolist() for i in range(g.n)]


def degree(g: GridGraph) -> np.ndarray:
    return g.simple.sum(axis=1).astype(float)


def betweenness(g: GridGraph) -> np.ndarray:
    """Brandes accumulation over unordered pairs ``{i, j}`` not containing the node."""
    nbrs = _neighbor_lists(g)
    cb = np.zeros(g.n)
    for s in range(g.n):
        _, sigma, preds, order = _bfs(nbrs, s)
        delta = [0.0] * g.n
        for w in reversed(order):
            coeff = (1.0 + delta[w]) / sigma[w]
            for v in preds[w]:
                delta[v] += sigma[v] * coeff
            if w != s:
                cb[w] += delta[w]
    # each unordered pair was counted from both endpoints
    return cb / 2.0


def closeness(g: GridGraph) -> np.ndarray:
    """Inverse total distance to the reachable nodes; 0 for isolated nodes."""
    nbrs = _neighbor_lists(g)
    out = np.zeros(g.n)
    for s in range(g.n):
        dist = _bfs(nbrs, s)[0]
        total = sum(d for d in dist if d > 0)
        out[s] = 1.0 / total if total > 0 else 0.0
    return out


def clustering(g: GridGraph) -> np.ndarray:
    a = g.simple.astype(float)
    k = a.sum(axis=1)
    triangles = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    out = np.zeros(g.n)
    ok = k >= 2
    out[ok] = 2.0 * triangles[ok] / (k[ok] * (k[ok] - 1))
    return out


def pagerank(g: GridGraph, alpha: float = 0.85, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    """Power iteration of ``PR(s) = (1-a)/N + a * sum_{j in N(s)} PR(j)/|N(j)|``.

    Nodes without neighbours spread their mass uniformly so the vector keeps
    summing to one.
    """
    a = g.simple.astype(float)
    n = g.n
    deg = a.sum(axis=0)
    dangling = deg == 0
    m = np.divide(a, deg, out=np.zeros_like(a), where=~dangling[None, :])
    pr = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = (1 - alpha) / n + alpha * (m @ pr + pr[dangling].sum() / n)
        if np.abs(nxt - pr).sum() < tol:
            return nxt / nxt.sum()
        pr = nxt
    raise NumericError(f"pagerank did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class TopoFeatures:
    degree: np.ndarray
    betweenness: np.ndarray
    closeness: np.ndarray
    pagerank: np.ndarray
    clustering: np.ndarray
    names: tuple = field(default=TOPO_NAMES)

    def matrix(self) -> np.ndarray:
        return np.column_stack([getattr(self, k) for k in TOPO_NAMES])


def topo_feature_vector(g: GridGraph, alpha: float = 0.85) -> TopoFeatures:
    return TopoFeatures(
        degree=degree(g),
        betweenness=betweenness(g),
        closeness=closeness(g),
        pagerank=pagerank(g, alpha=alpha),
        clustering=clustering(g),
    )


# --- export -----------------------------------------------------------------

def write_edges_csv(g: GridGraph, path):
    ids = g.ids or tuple(range(g.n))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for i, j in g.edges():
            w.writerow([ids[i], ids[j]])


def write_node_features_csv(g: GridGraph, feats: TopoFeatures, path):
    ids = g.ids or tuple(range(g.n))
    m = feats.matrix()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *TOPO_NAMES])
        for i in range(g.n):
            w.writerow([ids[i], *(repr(float(x)) for x in m[i])])


def read_edges_csv(path, ids):
    """Rebuild the unit-diagonal adjacency for ``ids`` from an edge list."""
    pos = {s: i for i, s in enumerate(ids)}
    a = np.eye(len(ids), dtype=np.int8)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("src", "dst"):
            if col not in (reader.fieldnames or ()):
                raise ValidationError(f"{path}: missing column {col!r}")
        for row in reader:
            i, j = pos[row["src"]], pos[row["dst"]]
            a[i, j] = a[j, i] = 1
    return a
