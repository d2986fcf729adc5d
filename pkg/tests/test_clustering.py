"""Clustering and PCA tests against brute-force oracles."""
import heapq
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprobe.clustering import (NOISE, ClusterResult, hdbscan,
                                 minimum_spanning_tree, mutual_reachability,
                                 pairwise_distances, pca_project)

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def prufer_decode(seq, n):
    deg = [1] * n
    for s in seq:
        deg[s] += 1
    heap = [i for i in range(n) if deg[i] == 1]
    heapq.heapify(heap)
    edges = []
    for s in seq:
        leaf = heapq.heappop(heap)
        edges.append((leaf, s))
        deg[s] -= 1
        if deg[s] == 1:
            heapq.heappush(heap, s)
    u = heapq.heappop(heap)
    v = heapq.heappop(heap)
    edges.append((u, v))
    return edges


def brute_force_mst_weight(weights):
    """Minimum total weight over ALL labeled spanning trees (Prufer walk)."""
    n = len(weights)
    best = np.inf
    for seq in itertools.product(range(n), repeat=n - 2):
        total = sum(weights[a][b] for a, b in prufer_decode(seq, n))
        best = min(best, total)
    return best


def single_linkage_cut(points, n_groups):
    """Merge closest components until n_groups remain (plain Euclidean)."""
    n = len(points)
    d = pairwise_distances(points)
    comp = list(range(n))
    pairs = sorted(((d[i, j], i, j) for i in range(n) for j in range(i + 1, n)))
    groups = n
    for _, i, j in pairs:
        if groups == n_groups:
            break
        ci, cj = comp[i], comp[j]
        if ci != cj:
            comp = [ci if c == cj else c for c in comp]
            groups -= 1
    ids = {c: k for k, c in enumerate(dict.fromkeys(comp))}
    return [frozenset(np.flatnonzero([comp[x] == c for x in range(n)]).tolist())
            for c in dict.fromkeys(comp)]


# ---------------------------------------------------------------------------
# Mutual reachability
# ---------------------------------------------------------------------------

class TestMutualReachability:
    def test_line_hand_computed(self):
        pts = np.array([[0.0], [1.0], [2.0], [10.0]])
        expected = np.array([
            [0, 1, 2, 10],
            [1, 0, 1, 9],
            [2, 1, 0, 8],
            [10, 9, 8, 0]], dtype=float)
        assert np.allclose(mutual_reachability(pts, 1), expected)

    def test_symmetric_and_nn_core(self):
        pts = RNG(0).normal(0, 1, (7, 3))
        m = mutual_reachability(pts, 1)
        assert np.allclose(m, m.T)
        d = pairwise_distances(pts)
        nn_dist = np.sort(d + np.diag([np.inf] * 7), axis=1)[:, 0]
        for a in range(7):
            for b in range(7):
                if a != b:
                    assert m[a, b] == max(nn_dist[a], nn_dist[b], d[a, b])

    def test_identical_points_core_dominates(self):
        pts = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0]])
        m = mutual_reachability(pts, 2)
        # the two identical points see each other at distance 0; their
        # 2nd-nearest neighbour is the far point, so cores dominate
        assert m[0, 1] == 5.0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            mutual_reachability(np.zeros((1, 2)), 1)


# ---------------------------------------------------------------------------
# MST
# ---------------------------------------------------------------------------

class TestMst:
    @pytest.mark.parametrize("n,seeds", [(4, 25), (5, 15), (6, 8), (7, 3), (8, 2)])
    def test_matches_exhaustive_minimum(self, n, seeds):
        for seed in range(seeds):
            pts = RNG(seed + 100 * n).normal(0, 1, (n, 3))
            w = pairwise_distances(pts)
            mine = sum(e[2] for e in minimum_spanning_tree(w))
            assert abs(mine - brute_force_mst_weight(w)) < 1e-9

    def test_edge_count(self):
        pts = RNG(3).normal(0, 1, (9, 2))
        assert len(minimum_spanning_tree(pairwise_distances(pts))) == 8


# ---------------------------------------------------------------------------
# HDBSCAN
# ---------------------------------------------------------------------------

def make_blobs(rng, sizes, dim=8, gap=10.0, spread=1.0):
    centers = rng.normal(0, 1, (len(sizes), dim))
    centers = centers / np.linalg.norm(centers, axis=1, keepdims=True) * gap
    pts = np.vstack([rng.normal(0, spread, (s, dim)) + centers[i]
                     for i, s in enumerate(sizes)])
    truth = np.repeat(np.arange(len(sizes)), sizes)
    return pts, truth


class TestHdbscan:
    def test_two_blobs_exactly_two_clusters(self):
        rng = RNG(1)
        pts, truth = make_blobs(rng, (5, 5), gap=100.0, spread=1.0)
        res = hdbscan(pts, min_cluster_size=2, min_samples=1)
        assert len(res.clusters) == 2
        assert not np.any(res.labels == NOISE)
        got = {frozenset(c.tolist()) for c in res.clusters}
        expected = {frozenset(np.flatnonzero(truth == g).tolist()) for g in (0, 1)}
        assert got == expected
        # brute-force oracle: cutting single linkage at the obvious gap
        assert got == set(single_linkage_cut(pts, 2))

    def test_identical_points_single_cluster(self):
        res = hdbscan(np.ones((6, 3)))
        assert len(res.clusters) == 1
        assert np.array_equal(res.labels, np.zeros(6, dtype=int))

    def test_far_singleton_is_noise(self):
        rng = RNG(2)
        pts = np.vstack([rng.normal(0, 0.01, (9, 3)), np.full((1, 3), 10.0)])
        res = hdbscan(pts, min_cluster_size=2)
        assert res.labels[9] == NOISE

    def test_permutation_invariance(self):
        rng = RNG(5)
        pts, _ = make_blobs(rng, (6, 4), gap=20.0)
        res = hdbscan(pts)
        perm = rng.permutation(len(pts))
        res_p = hdbscan(pts[perm])
        assert np.array_equal(res_p.labels, res.labels[perm])

    def test_major_cluster_equals_largest_blob_100_seeds(self):
        hits = 0
        for seed in range(100):
            rng = RNG(seed)
            pts, truth = make_blobs(rng, (6, 4), dim=8, gap=10.0, spread=1.0)
            res = hdbscan(pts, min_cluster_size=2, min_samples=1)
            major = set(res.major.tolist()) if res.major is not None else set()
            if major == set(np.flatnonzero(truth == 0).tolist()):
                hits += 1
        assert hits == 100

    def test_scattered_points_all_noise(self):
        # three mutually distant points: no density structure at all
        pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 17.0]])
        res = hdbscan(pts)
        assert len(res.clusters) == 0
        assert np.all(res.labels == NOISE)

    def test_cluster_ordering_by_size_then_tightness(self):
        rng = RNG(8)
        pts, _ = make_blobs(rng, (7, 3), gap=50.0)
        res = hdbscan(pts)
        sizes = [len(c) for c in res.clusters]
        assert sizes == sorted(sizes, reverse=True)

    def test_equal_size_tie_broken_by_tightness(self):
        rng = RNG(11)
        tight = rng.normal(0, 0.01, (4, 3))
        loose = rng.normal(0, 1.0, (4, 3)) + 50.0
        res = hdbscan(np.vstack([loose, tight]))
        if len(res.clusters) == 2 and all(len(c) == 4 for c in res.clusters):
            assert set(res.major.tolist()) == {4, 5, 6, 7}

    def test_min_points(self):
        with pytest.raises(ValueError):
            hdbscan(np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def principal_angle(u, v):
    """Largest principal angle between the row spans of u and v."""
    qu = np.linalg.qr(u.T)[0]
    qv = np.linalg.qr(v.T)[0]
    s = np.linalg.svd(qu.T @ qv, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


class TestPca:
    def test_line_in_3d_second_variance_zero(self):
        rng = RNG(0)
        t = rng.normal(0, 1, 20)
        pts = np.outer(t, [1.0, 2.0, -1.0]) + 5.0
        res = pca_project(pts, 2)
        assert res.variances[1] < 1e-10

    def test_variance_ordering(self):
        rng = RNG(1)
        pts = rng.normal(0, 1, (30, 6)) * np.array([5, 3, 2, 1, 0.5, 0.1])
        res = pca_project(pts, 4)
        assert np.all(np.diff(res.variances) <= 1e-12)

    def test_top2_subspace_matches_eigendecomposition(self):
        rng = RNG(2)
        pts = rng.normal(0, 1, (10, 5))
        res = pca_project(pts, 2)
        cov = np.cov(pts.T, ddof=1)
        evals, evecs = np.linalg.eigh(cov)
        oracle = evecs[:, np.argsort(evals)[::-1][:2]].T
        assert principal_angle(res.components, oracle) < 1e-6
        assert np.allclose(np.sort(res.variances)[::-1],
                           np.sort(evals)[::-1][:2], rtol=1e-8)

    def test_reconstruction_full_rank(self):
        rng = RNG(3)
        pts = rng.normal(0, 1, (10, 5))
        res = pca_project(pts, 5)
        rec = res.coords @ res.components + pts.mean(axis=0)
        assert np.abs(rec - pts).max() < 1e-9

    def test_gram_path_for_wide_data(self):
        rng = RNG(4)
        pts = rng.normal(0, 1, (6, 200))
        res = pca_project(pts, 2)
        assert res.coords.shape == (6, 2)
        cov_eigs = np.sort(np.linalg.eigvalsh(np.cov(pts.T, ddof=1)))[::-1]
        assert np.allclose(res.variances, cov_eigs[:2], rtol=1e-6)

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            pca_project(np.zeros((5, 3)), 4)
        with pytest.raises(ValueError):
            pca_project(np.zeros((5, 3)), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mst_weight_never_above_random_tree(seed):
    rng = RNG(seed)
    pts = rng.normal(0, 1, (7, 3))
    w = pairwise_distances(pts)
    mst_weight = sum(e[2] for e in minimum_spanning_tree(w))
    seq = rng.integers(0, 7, 5)
    random_tree = sum(w[a][b] for a, b in prufer_decode(list(seq), 7))
    assert mst_weight <= random_tree + 1e-12
