"""HDBSCAN over confidence-change vectors.

Four explicit stages: core distances, mutual-reachability minimum spanning
tree (Prim), condensed tree (single-linkage dendrogram pruned by
min_cluster_size), and stability-based cluster extraction (excess of mass).
Noise is labeled -1; clusters are renumbered 1..Q by first appearance.

Unlike most library defaults, the condensed-tree root is selectable, so a
dataset that never truly splits comes back as one cluster rather than all
noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import TooFewPointsError


@dataclass(frozen=True)
class HdbscanParams:
    min_samples: int = 5
    min_cluster_size: int | None = None  # None: max(5, n // 200)

    def resolved_mcs(self, n: int) -> int:
        if self.min_cluster_size is None:
            return max(5, n // 200)
        return self.min_cluster_size

    def __post_init__(self):
        if self.min_samples < 1:
            raise TooFewPointsError("min_samples must be >= 1")
        if self.min_cluster_size is not None and self.min_cluster_size < 2:
            raise TooFewPointsError("min_cluster_size must be >= 2")


@dataclass
class CondensedTree:
    """Flat condensed hierarchy. Points are 0..n_points-1; condensed cluster
    ids start at n_points (the root). Each row says: ``child`` (a point or a
    cluster) left ``parent`` at density level ``lam`` with ``child_size``
    members."""

    n_points: int
    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    child_size: np.ndarray

    @property
    def root(self) -> int:
        return self.n_points


@dataclass
class ClusterLabels:
    """labels in {-1, 1..q}; -1 is noise."""

    labels: np.ndarray
    q: int


def core_distances(points, min_samples: int) -> np.ndarray:
    """Distance from each point to its min_samples-th nearest neighbor
    (self excluded; clamped to the farthest neighbor when n == min_samples)."""
    pts = numerics.check_finite(points, "points")
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n < 2 or n < min_samples:
        raise TooFewPointsError(f"{n} points < min_samples={min_samples} (or < 2)")
    kth = min(min_samples, n - 1)
    d = np.sqrt(numerics.pairwise_sq_dist(pts, pts))
    np.fill_diagonal(d, np.inf)
    return np.partition(d, kth - 1, axis=1)[:, kth - 1]


def mutual_reachability_mst(points, cores) -> np.ndarray:
    """(n-1, 3) edge array [a, b, weight] of an MST under
    d_mreach(a,b) = max(core_a, core_b, ||a-b||), built with Prim's
    algorithm; ties resolve toward lower vertex indices. Edges are
    normalized to a < b and returned in discovery order."""
    pts = numerics.check_finite(points, "points")
    if pts.ndim == 1:
        pts = pts[:, None]
    cores = numerics.check_finite(cores, "cores")
    n = pts.shape[0]
    if n == 1:
        return np.empty((0, 3))
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    dist0 = np.sqrt(numerics.pairwise_sq_dist(pts[0:1], pts))[0]
    key = np.maximum(np.maximum(cores[0], cores), dist0)
    key[0] = np.inf
    parent = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    for i in range(n - 1):
        masked = np.where(in_tree, np.inf, key)
        v = int(masked.argmin())
        a, b = (parent[v], v) if parent[v] < v else (v, parent[v])
        edges[i] = (a, b, key[v])
        in_tree[v] = True
        dv = np.sqrt(numerics.pairwise_sq_dist(pts[v : v + 1], pts))[0]
        mreach = np.maximum(np.maximum(cores[v], cores), dv)
        better = (~in_tree) & (mreach < key)
        key[better] = mreach[better]
        parent[better] = v
        key[v] = np.inf
    return edges


def _single_linkage(mst: np.ndarray, n: int):
    """Union-find over ascending MST edges -> dendrogram arrays
    (left, right, dist, size), node ids n..2n-2, root = 2n-2."""
    order = np.lexsort((mst[:, 1], mst[:, 0], mst[:, 2]))
    uf_parent = np.arange(2 * n - 1, dtype=np.int64)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x: int) -> int:
        root = x
        while uf_parent[root] != root:
            root = uf_parent[root]
        while uf_parent[x] != root:
            uf_parent[x], x = root, uf_parent[x]
        return root

    left = np.empty(n - 1, dtype=np.int64)
    right = np.empty(n - 1, dtype=np.int64)
    dist = np.empty(n - 1)
    for i, e in enumerate(order):
        a, b, w = mst[e]
        ra, rb = find(int(a)), find(int(b))
        node = n + i
        left[i], right[i], dist[i] = ra, rb, w
        size[node] = size[ra] + size[rb]
        uf_parent[ra] = node
        uf_parent[rb] = node
    return left, right, dist, size


def condense_tree(mst, min_cluster_size: int) -> CondensedTree:
    """Prune the single-linkage dendrogram: splits where a side is smaller
    than min_cluster_size shed those points ("falling out" of the current
    cluster) instead of starting a new cluster. Lambda = 1/distance at the
    split (infinite for zero-distance merges)."""
    mst = np.asarray(mst, dtype=np.float64)
    n = mst.shape[0] + 1
    if n < 2:
        raise TooFewPointsError("condense_tree needs >= 2 points")
    left, right, dist, size = _single_linkage(mst, n)

    def leaves(node: int):
        out = []
        stack = [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                stack.append(int(right[x - n]))
                stack.append(int(left[x - n]))
        return out

    parents, children, lams, sizes = [], [], [], []
    next_cluster = n + 1
    stack = [(2 * n - 2, n)]  # (dendrogram node, condensed cluster id)
    while stack:
        node, cluster = stack.pop()
        d = dist[node - n]
        lam = np.inf if d <= 0.0 else 1.0 / d
        side_l, side_r = int(left[node - n]), int(right[node - n])
        size_l = 1 if side_l < n else int(size[side_l])
        size_r = 1 if side_r < n else int(size[side_r])
        if size_l >= min_cluster_size and size_r >= min_cluster_size:
            for side, ssz in ((side_l, size_l), (side_r, size_r)):
                parents.append(cluster)
                children.append(next_cluster)
                lams.append(lam)
                sizes.append(ssz)
                stack.append((side, next_cluster))
                next_cluster += 1
        elif size_l >= min_cluster_size or size_r >= min_cluster_size:
            keep, shed = (side_l, side_r) if size_l >= min_cluster_size else (side_r, side_l)
            for p in leaves(shed):
                parents.append(cluster)
                children.append(p)
                lams.append(lam)
                sizes.append(1)
            stack.append((keep, cluster))
        else:
            for p in leaves(side_l) + leaves(side_r):
                parents.append(cluster)
                children.append(p)
                lams.append(lam)
                sizes.append(1)
    return CondensedTree(
        n_points=n,
        parent=np.asarray(parents, dtype=np.int64),
        child=np.asarray(children, dtype=np.int64),
        lam=np.asarray(lams, dtype=np.float64),
        child_size=np.asarray(sizes, dtype=np.int64),
    )


def extract_clusters(tree: CondensedTree) -> ClusterLabels:
    """Excess-of-mass selection over the condensed tree.

    stability(C) = sum over departures from C of (lambda - lambda_birth(C))
    weighted by departure size; a parent is kept iff its stability exceeds
    the sum of its children's selected stabilities. Points never captured by
    a selected cluster are noise.
    """
    n = tree.n_points
    root = tree.root
    cluster_ids = [root] + sorted(int(c) for c in tree.child[tree.child >= n])
    birth = {root: 0.0}
    children_of = {c: [] for c in cluster_ids}
    rows_of = {c: [] for c in cluster_ids}
    for parent, child, lam in zip(tree.parent, tree.child, tree.lam):
        parent, child = int(parent), int(child)
        rows_of[parent].append((child, float(lam)))
        if child >= n:
            birth[child] = float(lam)
            children_of[parent].append(child)

    stability = {}
    for c in cluster_ids:
        b = birth[c]
        total = 0.0
        for parent, child, lam, sz in zip(tree.parent, tree.child, tree.lam, tree.child_size):
            if int(parent) != c:
                continue
            # zero-distance departures (duplicates) carry no finite mass
            if np.isinf(b) or np.isinf(lam):
                continue
            total += (float(lam) - b) * int(sz)
        stability[c] = total

    selected_flag = {}
    value = {}
    for c in sorted(cluster_ids, reverse=True):
        subtree = sum(value[k] for k in children_of[c])
        if stability[c] > subtree:
            selected_flag[c] = True
            value[c] = stability[c]
        else:
            selected_flag[c] = False
            value[c] = subtree

    selected = []
    queue = [root]
    while queue:
        c = queue.pop(0)
        if selected_flag[c]:
            selected.append(c)
        else:
            queue.extend(children_of[c])

    labels = np.full(n, -1, dtype=np.int64)
    for q, c in enumerate(sorted(selected), start=1):
        stack = [c]
        while stack:
            cc = stack.pop()
            for child, _ in rows_of[cc]:
                if child < n:
                    labels[child] = q
                else:
                    stack.append(child)
    return ClusterLabels(labels=labels, q=len(selected))


def hdbscan(points, params: HdbscanParams) -> ClusterLabels:
    """Composition of the four stages; deterministic for identical input."""
    pts = numerics.check_finite(points, "points")
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n == 0:
        return ClusterLabels(labels=np.empty(0, dtype=np.int64), q=0)
    mcs = params.resolved_mcs(n)
    if n < max(mcs, 2):
        return ClusterLabels(labels=np.full(n, -1, dtype=np.int64), q=0)
    ms = min(params.min_samples, n - 1)
    cores = core_distances(pts, ms)
    mst = mutual_reachability_mst(pts, cores)
    tree = condense_tree(mst, mcs)
    return extract_clusters(tree)
