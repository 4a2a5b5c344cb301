"""Off-manifold removal before training.

Build a cosine kNN graph over the features, partition it into K+1
communities, and drop the community whose centroid is, on average, farthest
from the others when that average cosine distance exceeds ``delta``.

Community detection uses the Leiden algorithm (``leidenalg``) on the
union-symmetrized graph with edge weights ``max(0, cos)``. Leiden has no
community-count argument, so the resolution is bisected to land near K+1
communities and the result is then repaired to exactly K+1 by merging the
closest centroids or splitting the most spread-out community with spherical
2-means. Before that repair, communities smaller than ``min_size`` (boundary
nodes Leiden leaves on their own) are folded into the nearest sizeable one so
that noise does not use up one of the K+1 slots.
"""

import logging
import math
from dataclasses import dataclass

import igraph as ig
import leidenalg
import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

TIE_DECIMALS = 12
KNN_BLOCK = 1024
MIN_COMMUNITY_FRAC = 0.005


@dataclass
class KnnGraph:
    """Directed kNN selections plus the features they were built from.

    ``neighbors[i]`` holds the ``min(k, n-1)`` nodes selected by ``i`` in
    order of increasing cosine distance, and ``weights[i]`` their cosine
    similarities. The undirected graph used downstream is the union of all
    selections (see :meth:`edges`).
    """

    n: int
    k: int
    neighbors: np.ndarray
    weights: np.ndarray
    features: np.ndarray

    def edges(self):
        """Undirected edge list ``(a, b, cos)`` with ``a < b``, sorted."""
        src = np.repeat(np.arange(self.n), self.neighbors.shape[1])
        dst = self.neighbors.ravel()
        a = np.minimum(src, dst)
        b = np.maximum(src, dst)
        pairs = np.unique(np.stack([a, b], axis=1), axis=0)
        cos = np.einsum("ij,ij->i", self.features[pairs[:, 0]], self.features[pairs[:, 1]])
        return pairs[:, 0], pairs[:, 1], np.clip(cos, -1.0, 1.0)

    def adjacency_sets(self):
        adj = [set() for _ in range(self.n)]
        a, b, _ = self.edges()
        for x, y in zip(a.tolist(), b.tolist()):
            adj[x].add(y)
            adj[y].add(x)
        return adj


@dataclass
class Communities:
    assignment: np.ndarray
    count: int
    centroids: np.ndarray


@dataclass
class PreprocessReport:
    removed_indices: np.ndarray
    distances: np.ndarray
    chosen: int
    threshold_hit: bool
    assignment: np.ndarray


def build_knn(features, k):
    """Cosine kNN graph. Distance ties (to 1e-12) go to the lower node id."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise DataError("need at least 2 points for a kNN graph", code="too_few_points")
    if k < 1:
        raise DataError("k must be >= 1", code="bad_k")
    if k >= n:
        log.warning("k=%d >= N=%d; clamping k to %d", k, n, n - 1)
        k = n - 1
    nbrs = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, KNN_BLOCK):
        stop = min(start + KNN_BLOCK, n)
        dist = np.round(1.0 - features[start:stop] @ features.T, TIE_DECIMALS)
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")
        nbrs[start:stop] = order[:, :k]
    weights = np.einsum("id,ikd->ik", features, features[nbrs])
    return KnnGraph(n=n, k=k, neighbors=nbrs, weights=np.clip(weights, -1.0, 1.0), features=features)


def centroids_of(features, assignment, count):
    cents = np.zeros((count, features.shape[1]))
    np.add.at(cents, assignment, features)
    norms = np.linalg.norm(cents, axis=1, keepdims=True)
    # A community whose members cancel out keeps its first member's direction.
    for c in np.flatnonzero(norms[:, 0] < 1e-12):
        cents[c] = features[np.flatnonzero(assignment == c)[0]]
        norms[c] = 1.0
    return cents / norms


def _relabel(assignment):
    """Dense ids ordered by each community's lowest member index."""
    _, first = np.unique(assignment, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(assignment.max() + 1, dtype=np.int64)
    remap[np.unique(assignment)[order]] = np.arange(order.shape[0])
    return remap[assignment]


def _leiden(graph, resolution, seed):
    part = leidenalg.find_partition(
        graph, leidenalg.RBConfigurationVertexPartition, weights="weight",
        resolution_parameter=resolution, n_iterations=-1, seed=seed)
    return np.asarray(part.membership, dtype=np.int64)


def _to_igraph(g):
    a, b, cos = g.edges()
    graph = ig.Graph(n=g.n, edges=list(zip(a.tolist(), b.tolist())), directed=False)
    graph.es["weight"] = np.maximum(cos, 0.0).tolist()
    return graph


def _resolution_search(graph, target, seed, rounds=30):
    """Bisect the (log) resolution so Leiden yields about ``target`` communities."""
    lo, hi = -6.0, 3.0
    best = None
    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        memb = _leiden(graph, 10.0 ** mid, seed)
        count = int(memb.max()) + 1
        if best is None or abs(count - target) < abs(best[1] - target):
            best = (memb, count)
        if count == target:
            break
        if count < target:
            lo = mid
        else:
            hi = mid
    return best[0]


def _spherical_2means(x, rng, iters=50):
    """Split unit vectors into two groups; both groups are non-empty."""
    n = x.shape[0]
    first = int(rng.integers(n))
    second = int(np.argmin(x @ x[first]))
    if second == first:
        second = (first + 1) % n
    cents = x[[first, second]]
    labels = None
    for _ in range(iters):
        new = np.argmax(x @ cents.T, axis=1)
        if np.all(new == new[0]):
            # Identical points: split by index so both halves are non-empty.
            new = (np.arange(n) >= n // 2).astype(np.int64)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        cents = centroids_of(x, labels, 2)
    return labels


def _spread(x, centroid):
    return float(np.var(1.0 - x @ centroid)) if x.shape[0] > 1 else -1.0


def _absorb_small(feats, memb, min_size):
    """Reassign members of communities below ``min_size`` to the nearest
    sizeable centroid; no-op when nothing is sizeable."""
    count = int(memb.max()) + 1
    sizes = np.bincount(memb, minlength=count)
    big = np.flatnonzero(sizes >= min_size)
    if big.size == 0 or big.size == count:
        return memb
    cents = centroids_of(feats, memb, count)[big]
    small = ~np.isin(memb, big)
    memb = memb.copy()
    memb[small] = big[np.argmax(feats[small] @ cents.T, axis=1)]
    return _relabel(memb)


def detect_communities(g, target, rng, min_size=None):
    """Partition ``g`` into exactly ``target`` communities.

    ``min_size`` defaults to ``max(2, ceil(0.005 * n))``; pass 1 to keep
    every community Leiden returns.
    """
    if target < 1:
        raise DataError("target must be >= 1", code="bad_target")
    if g.n < target:
        raise DataError("too few points", code="too_few_points")
    if min_size is None:
        min_size = max(2, math.ceil(MIN_COMMUNITY_FRAC * g.n))
    seed = int(rng.integers(0, 2**31 - 1))
    memb = _relabel(_resolution_search(_to_igraph(g), target, seed))
    feats = g.features
    memb = _absorb_small(feats, memb, min_size)
    count = int(memb.max()) + 1

    while count > target:
        cents = centroids_of(feats, memb, count)
        cos = cents @ cents.T
        np.fill_diagonal(cos, -np.inf)
        a, b = np.unravel_index(np.argmax(cos), cos.shape)
        a, b = min(a, b), max(a, b)
        memb = np.where(memb == b, a, memb)
        memb = _relabel(memb)
        count -= 1

    while count < target:
        cents = centroids_of(feats, memb, count)
        sizes = np.bincount(memb, minlength=count)
        spreads = [(_spread(feats[memb == c], cents[c]) if sizes[c] > 1 else -np.inf)
                   for c in range(count)]
        c = int(np.argmax(spreads))
        members = np.flatnonzero(memb == c)
        halves = _spherical_2means(feats[members], rng)
        memb = memb.copy()
        memb[members[halves == 1]] = count
        memb = _relabel(memb)
        count += 1

    return Communities(assignment=memb, count=count, centroids=centroids_of(feats, memb, count))


def community_distances(comms):
    """Mean cosine distance from each centroid to every other centroid."""
    if comms.count < 2:
        raise DataError("need at least 2 communities", code="too_few_communities")
    dist = 1.0 - comms.centroids @ comms.centroids.T
    np.fill_diagonal(dist, 0.0)
    return dist.sum(axis=1) / (comms.count - 1)


def preprocess(fs, k, num_classes, delta, rng):
    """Drop the most distant of K+1 communities if it lies beyond ``delta``.

    Returns ``(filtered FeatureSet, PreprocessReport)``; the FeatureSet is the
    input object itself when nothing is removed.
    """
    if not delta > 0:
        raise DataError("delta must be positive", code="bad_delta")
    g = build_knn(fs.features, k)
    comms = detect_communities(g, num_classes + 1, rng)
    d = community_distances(comms)
    chosen = int(np.argmax(d))
    hit = bool(d[chosen] > delta)
    removed = np.flatnonzero(comms.assignment == chosen) if hit else np.empty(0, dtype=np.int64)
    report = PreprocessReport(removed, d, chosen, hit, comms.assignment)
    if not hit:
        return fs, report
    keep = np.setdiff1d(np.arange(fs.n), removed)
    return fs.subset(keep), report


def report_rows(report, n):
    """CSV rows ``(index, community, removed)`` for every input point."""
    removed = np.zeros(n, dtype=bool)
    removed[report.removed_indices] = True
    return [(i, int(report.assignment[i]), int(removed[i])) for i in range(n)]

