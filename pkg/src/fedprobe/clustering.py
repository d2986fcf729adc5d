"""Density-based clustering and PCA diagnostics.

The clustering is a from-scratch HDBSCAN: mutual-reachability metric,
Prim minimum spanning tree, single-linkage hierarchy, condensed tree at
min_cluster_size, and flat extraction by excess-of-mass stability. It is
deliberately dense-matrix and single-threaded; inputs are tens of points.

Pinned semantics (the literature leaves these open):
- lambda = 1 / distance, with zero distances capped so identical points get
  a large finite density level;
- the hierarchy root is never selectable, so inputs with no internal density
  structure come back as all-noise (callers may treat that as "no verdict");
- a selected cluster owns every point of its condensed subtree, including
  points that eroded out at lower density levels;
- degenerate inputs whose mutual-reachability distances are all equal form a
  single cluster containing everything (no density contrast to split on);
- equal-size clusters are ordered by smaller mean intra-cluster pairwise
  (Euclidean) distance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE = -1
_LAMBDA_CAP = 1e12


# ---------------------------------------------------------------------------
# Mutual reachability and MST
# ---------------------------------------------------------------------------

def pairwise_distances(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def mutual_reachability(points: np.ndarray, min_samples: int = 1) -> np.ndarray:
    """d_mreach(a, b) = max(core(a), core(b), d(a, b)).

    core(x) is the distance from x to its min_samples-th nearest *other*
    point, so min_samples=1 means plain nearest-neighbour distance.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least two points")
    if not (1 <= min_samples <= n - 1):
        raise ValueError(f"min_samples must be in [1, {n - 1}]")
    dist = pairwise_distances(pts)
    others = np.sort(dist + np.diag(np.full(n, np.inf)), axis=1)
    core = others[:, min_samples - 1]
    mreach = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mreach, 0.0)
    return mreach


def minimum_spanning_tree(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Prim's algorithm on a dense symmetric matrix; returns (i, j, w) edges."""
    n = len(weights)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_from = np.zeros(n, dtype=int)
    in_tree[0] = True
    best_w = weights[0].copy()
    best_w[0] = np.inf
    best = best_w
    edges = []
    for _ in range(n - 1):
        j = int(np.argmin(np.where(in_tree, np.inf, best)))
        i = int(best_from[j])
        edges.append((min(i, j), max(i, j), float(best[j])))
        in_tree[j] = True
        closer = weights[j] < best
        best = np.where(closer & ~in_tree, weights[j], best)
        best_from = np.where(closer & ~in_tree, j, best_from)
    return edges


# ---------------------------------------------------------------------------
# Hierarchy and condensed tree
# ---------------------------------------------------------------------------

def _single_linkage(n: int, edges: list[tuple[int, int, float]]):
    """Union-find agglomeration; returns (children, distances, sizes).

    Dendrogram nodes 0..n-1 are points; node n+t is the merge produced by
    the t-th edge in ascending weight order.
    """
    order = sorted(range(len(edges)), key=lambda e: (edges[e][2], edges[e][0], edges[e][1]))
    parent = list(range(2 * n - 1))

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    children = {}
    distances = {}
    sizes = {i: 1 for i in range(n)}
    nxt = n
    for e in order:
        i, j, w = edges[e]
        ri, rj = find(i), find(j)
        children[nxt] = (ri, rj)
        distances[nxt] = w
        sizes[nxt] = sizes[ri] + sizes[rj]
        parent[ri] = parent[rj] = nxt
        nxt += 1
    return children, distances, sizes


def _subtree_points(node: int, n: int, children) -> list[int]:
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        if x < n:
            out.append(x)
        else:
            stack.extend(children[x])
    return out


@dataclass
class _Condensed:
    birth: dict[int, float]              # cluster id -> birth lambda
    point_records: list[tuple[int, int, float]]   # (cluster, point, exit lambda)
    cluster_parent: dict[int, int]       # child cluster -> parent cluster
    cluster_children: dict[int, list[int]]
    cluster_points: dict[int, list[int]]  # points recorded directly under cluster


def _condense(n: int, children, distances, sizes, min_cluster_size: int) -> _Condensed:
    root_node = 2 * n - 2
    tree = _Condensed(birth={0: 0.0}, point_records=[], cluster_parent={},
                      cluster_children={0: []}, cluster_points={0: []})
    next_cluster = 1
    # stack entries: (dendrogram node, cluster id, lambda at which we got here)
    stack = [(root_node, 0, 0.0)]
    while stack:
        node, cluster, lam_here = stack.pop()
        if node < n:
            # a bare point continuing a cluster: it exits at the level of the
            # merge that created it (the lambda we carried down)
            tree.point_records.append((cluster, node, lam_here))
            tree.cluster_points[cluster].append(node)
            continue
        d = distances[node]
        lam = 1.0 / d if d > 0 else _LAMBDA_CAP
        a, b = children[node]
        sa = sizes[a] if a >= n else 1
        sb = sizes[b] if b >= n else 1
        big_a, big_b = sa >= min_cluster_size, sb >= min_cluster_size
        if big_a and big_b:
            for sub in (a, b):
                cid = next_cluster
                next_cluster += 1
                tree.birth[cid] = lam
                tree.cluster_parent[cid] = cluster
                tree.cluster_children[cluster].append(cid)
                tree.cluster_children[cid] = []
                tree.cluster_points[cid] = []
                stack.append((sub, cid, lam))
        elif big_a or big_b:
            keep, drop = (a, b) if big_a else (b, a)
            for p in _subtree_points(drop, n, children):
                tree.point_records.append((cluster, p, lam))
                tree.cluster_points[cluster].append(p)
            stack.append((keep, cluster, lam))
        else:
            for p in _subtree_points(node, n, children):
                tree.point_records.append((cluster, p, lam))
                tree.cluster_points[cluster].append(p)
    return tree


def _stability(tree: _Condensed, sizes_of: dict[int, int]) -> dict[int, float]:
    stab = {c: 0.0 for c in tree.birth}
    for cluster, _point, lam in tree.point_records:
        stab[cluster] += lam - tree.birth[cluster]
    for child, parent in tree.cluster_parent.items():
        stab[parent] += sizes_of[child] * (tree.birth[child] - tree.birth[parent])
    return stab


def _cluster_sizes(tree: _Condensed) -> dict[int, int]:
    """Total points in each cluster's condensed subtree."""
    sizes = {}
    order = sorted(tree.birth, reverse=True)  # children have larger ids
    for c in order:
        sizes[c] = len(tree.cluster_points[c]) + sum(
            sizes[k] for k in tree.cluster_children[c])
    return sizes


@dataclass(frozen=True)
class ClusterResult:
    """Flat clustering: per-point labels (NOISE = -1) and member lists.

    `clusters` holds member-id arrays ordered largest first; label k refers
    to clusters[k].
    """

    labels: np.ndarray
    clusters: list[np.ndarray]

    @property
    def major(self) -> np.ndarray | None:
        return self.clusters[0] if self.clusters else None


def hdbscan(points: np.ndarray, min_cluster_size: int = 2,
            min_samples: int = 1) -> ClusterResult:
    """Density clustering with no preset cluster count; see module docstring."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least two points")
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    mreach = mutual_reachability(pts, min_samples)

    off_diag = mreach[~np.eye(n, dtype=bool)]
    if off_diag.max() - off_diag.min() <= 1e-12 * max(off_diag.max(), 1.0):
        # no density contrast at all: one cluster holding every point
        return _result(pts, {0: list(range(n))})

    edges = minimum_spanning_tree(mreach)
    children, distances, sizes = _single_linkage(n, edges)
    tree = _condense(n, children, distances, sizes, min_cluster_size)
    subtree_sizes = _cluster_sizes(tree)
    stab = _stability(tree, subtree_sizes)

    # excess-of-mass selection, root (cluster 0) excluded
    candidates = [c for c in sorted(tree.birth, reverse=True) if c != 0]
    selected: set[int] = set()
    hat = dict(stab)
    for c in candidates:
        kids = tree.cluster_children[c]
        child_mass = sum(hat[k] for k in kids)
        if stab[c] >= child_mass:
            hat[c] = stab[c]
            selected.add(c)
            _deselect_descendants(tree, c, selected)
        else:
            hat[c] = child_mass

    members: dict[int, list[int]] = {c: [] for c in selected}
    for cluster, point, _lam in tree.point_records:
        owner = cluster
        while owner != 0 and owner not in selected:
            owner = tree.cluster_parent[owner]
        if owner in selected:
            members[owner].append(point)
    return _result(pts, members)


def _deselect_descendants(tree: _Condensed, cluster: int, selected: set[int]):
    stack = list(tree.cluster_children[cluster])
    while stack:
        c = stack.pop()
        selected.discard(c)
        stack.extend(tree.cluster_children[c])


def _result(pts: np.ndarray, members: dict[int, list[int]]) -> ClusterResult:
    groups = [np.array(sorted(v), dtype=int) for v in members.values() if v]

    def mean_intra(ids: np.ndarray) -> float:
        if len(ids) < 2:
            return 0.0
        d = pairwise_distances(pts[ids])
        return float(d[np.triu_indices(len(ids), 1)].mean())

    groups.sort(key=lambda g: (-len(g), mean_intra(g), g[0].item()))
    labels = np.full(len(pts), NOISE, dtype=int)
    for rank, g in enumerate(groups):
        labels[g] = rank
    return ClusterResult(labels=labels, clusters=groups)


def reachability_core_component(points: np.ndarray, min_samples: int = 1,
                                cut_factor: float = 3.0) -> np.ndarray:
    """Largest component of the mutual-reachability MST after a scale cut.

    Edges longer than cut_factor times the median MST edge are removed; the
    biggest remaining component is the densest connected core. This is the
    single-linkage "cut at the obvious gap" construction, anchored at the
    median edge so a majority core sets the scale.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least two points")
    if cut_factor <= 1.0:
        raise ValueError("cut_factor must exceed 1")
    edges = minimum_spanning_tree(mutual_reachability(pts, min_samples))
    weights = sorted(e[2] for e in edges)
    threshold = cut_factor * weights[len(weights) // 2]
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, w in edges:
        if w <= threshold:
            parent[find(a)] = find(b)
    members: dict[int, list[int]] = {}
    for p in range(n):
        members.setdefault(find(p), []).append(p)
    biggest = max(members.values(), key=lambda m: (len(m), -m[0]))
    return np.array(sorted(biggest), dtype=int)


# ---------------------------------------------------------------------------
# PCA by power iteration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaResult:
    coords: np.ndarray       # (n, k) projections onto the top-k directions
    components: np.ndarray   # (k, d) unit-norm principal directions
    variances: np.ndarray    # (k,) eigenvalues of the covariance


def _power_iteration(mat: np.ndarray, start: np.ndarray,
                     tol: float = 1e-8, max_iter: int = 100_000) -> tuple[np.ndarray, float]:
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return v, 0.0
        w /= norm
        if np.dot(w, v) < 0:
            w = -w
        if np.linalg.norm(w - v) < tol:
            return w, float(w @ mat @ w)
        v = w
    return v, float(v @ mat @ v)


def pca_project(points: np.ndarray, k: int = 2) -> PcaResult:
    """Top-k principal directions via power iteration with deflation.

    Component signs are arbitrary; compare subspaces, not signed vectors.
    Uses the Gram matrix when there are fewer points than dimensions, so
    it stays cheap for long flattened model updates.
    """
    pts = np.asarray(points, dtype=np.float64)
    n, d = pts.shape
    if n < 2:
        raise ValueError("need at least two points")
    if not (1 <= k <= min(n, d)):
        raise ValueError(f"k must be in [1, {min(n, d)}]")
    centered = pts - pts.mean(axis=0)
    denom = n - 1
    rng = np.random.default_rng(0)

    use_gram = n < d
    mat = (centered @ centered.T if use_gram else centered.T @ centered) / denom
    m = len(mat)
    comps, vars_ = [], []
    basis: list[np.ndarray] = []
    work = mat.copy()
    for _ in range(k):
        start = rng.normal(size=m)
        for b in basis:
            start -= (start @ b) * b
        if np.linalg.norm(start) < 1e-12:
            start = rng.normal(size=m)
        vec, eig = _power_iteration(work, start)
        if eig <= 1e-300:
            # rank exhausted: complete with any unit vector orthogonal to
            # the ones found so far
            vec = _orthogonal_completion(basis, m, rng)
            eig = 0.0
        else:
            # re-orthogonalize against earlier eigenvectors so k = d spans
            # the whole space exactly
            for b in basis:
                vec = vec - (vec @ b) * b
            nrm = np.linalg.norm(vec)
            vec = vec / nrm if nrm > 1e-12 else _orthogonal_completion(basis, m, rng)
        basis.append(vec)
        work = work - eig * np.outer(vec, vec)
        if use_gram:
            direction = centered.T @ vec
            for c in comps:
                direction = direction - (direction @ c) * c
            nrm = np.linalg.norm(direction)
            if nrm < 1e-150:
                direction = _orthogonal_completion([c for c in comps], d, rng)
            else:
                direction = direction / nrm
        else:
            direction = vec
        comps.append(direction)
        vars_.append(eig)
    components = np.array(comps)
    coords = centered @ components.T
    return PcaResult(coords=coords, components=components,
                     variances=np.array(vars_))


def _orthogonal_completion(basis: list[np.ndarray], dim: int,
                           rng: np.random.Generator) -> np.ndarray:
    for _ in range(100):
        v = rng.normal(size=dim)
        for b in basis:
            v -= (v @ b) * b
        nrm = np.linalg.norm(v)
        if nrm > 1e-9:
            return v / nrm
    raise np.linalg.LinAlgError("could not complete orthogonal basis")
