"""Bottom-up superpoint clustering and superpoint-level pooling.

Clustering is greedy agglomeration over a k-NN graph: edges are sorted by
static cost spatial_weight * |dxyz| + color_weight * |drgb| and merged
cheapest-first while the cost stays below merge_threshold and more than
target_max clusters remain. Ties break on the smaller point-index pair so
the partition is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Matrix, segment_mean
from .config import SuperpointConfig
from .errors import ShapeError
from .pointcloud import PointCloud


@dataclass(frozen=True)
class SuperpointPartition:
    assignment: np.ndarray  # N, superpoint id in [0, M)
    centroids: np.ndarray  # M x 3
    sizes: np.ndarray  # M

    @property
    def n_superpoints(self):
        return int(self.centroids.shape[0])

    @property
    def n_points(self):
        return int(self.assignment.shape[0])


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, u):
        root = u
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[u] != root:
            self.parent[u], u = root, self.parent[u]
        return root

    def union(self, u, v):
        ru, rv = self.find(u), self.find(v)
        if ru == rv:
            return False
        if rv < ru:  # keep the smaller index as representative
            ru, rv = rv, ru
        self.parent[rv] = ru
        return True


def compute_superpoints(pc: PointCloud, params: SuperpointConfig) -> SuperpointPartition:
    """Partition the cloud into spatially and chromatically coherent clusters."""
    n = pc.n_points
    if n == 1:
        return SuperpointPartition(
            assignment=np.zeros(1, dtype=np.int64),
            centroids=pc.coords.copy(),
            sizes=np.ones(1, dtype=np.int64),
        )

    k = min(params.knn, n - 1)
    tree = cKDTree(pc.coords)
    dists, nbrs = tree.query(pc.coords, k=k + 1)
    # drop self matches, build undirected unique edges
    src = np.repeat(np.arange(n), k)
    dst = nbrs[:, 1:].reshape(-1)
    spatial = dists[:, 1:].reshape(-1)
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    packed = lo * n + hi
    uniq, first = np.unique(packed, return_index=True)
    lo, hi, spatial = lo[first], hi[first], spatial[first]
    color = np.linalg.norm(pc.colors[lo] - pc.colors[hi], axis=1)
    cost = params.spatial_weight * spatial + params.color_weight * color

    order = np.lexsort((hi, lo, cost))
    uf = _UnionFind(n)
    m = n
    for e in order:
        if m <= params.target_max:
            break
        if cost[e] >= params.merge_threshold:
            break
        if uf.union(int(lo[e]), int(hi[e])):
            m -= 1

    roots = np.array([uf.find(i) for i in range(n)], dtype=np.int64)
    # relabel clusters by smallest member index
    _, assignment = np.unique(roots, return_inverse=True)
    m = int(assignment.max()) + 1
    sizes = np.bincount(assignment, minlength=m)
    centroids = np.zeros((m, 3))
    for c in range(3):
        centroids[:, c] = np.bincount(assignment, weights=pc.coords[:, c], minlength=m)
    centroids /= sizes[:, None]
    return SuperpointPartition(
        assignment=assignment.astype(np.int64),
        centroids=centroids,
        sizes=sizes.astype(np.int64),
    )


def superpoint_pool(point_features: Matrix, part: SuperpointPartition) -> Matrix:
    """Average-pool point features into superpoints (differentiable)."""
    if point_features.rows != part.n_points:
        raise ShapeError(
            f"point features rows ({point_features.rows}) != points ({part.n_points})"
        )
    return segment_mean(point_features, part.assignment, part.n_superpoints)


def broadcast_to_points(sp_values: np.ndarray, part: SuperpointPartition) -> np.ndarray:
    """Copy per-superpoint rows (or scalars) back to their member points."""
    return np.asarray(sp_values)[part.assignment]


def pairwise_centroid_distances(part: SuperpointPartition) -> np.ndarray:
    """Symmetric M x M Euclidean centroid distances, zero diagonal."""
    c = part.centroids
    diff = c[:, None, :] - c[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(d, 0.0)
    return d


def distances_to_centroids(point: np.ndarray, part: SuperpointPartition) -> np.ndarray:
    """Euclidean distance from one xyz position to every superpoint centroid."""
    diff = part.centroids - np.asarray(point).reshape(1, 3)
    return np.sqrt(np.sum(diff * diff, axis=1))


def save_partition(path, part: SuperpointPartition):
    Path(path).write_text(
        json.dumps({"assignment": part.assignment.tolist()}, sort_keys=True)
    )


def load_partition_assignment(path):
    return np.asarray(json.loads(Path(path).read_text())["assignment"], dtype=np.int64)
