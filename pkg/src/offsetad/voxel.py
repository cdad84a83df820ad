"""Voxel grid with a voxel<->point index, and fixed per-point features.

The feature encoder is handcrafted and has no learned weights. Each point
gets a C-dimensional row (C = 32 by default):

    cols  0-2   offset to the centroid of the point's voxel (voxel units)
    cols  3-5   point normal
    cols  6-8   linearity, planarity, sphericity over k neighbours
    cols  9-10  mean and std of neighbour distance (voxel units)
    col  11     points sharing the voxel, divided by k
    cols 12-17  linearity, planarity, sphericity over 2k and 4k neighbours
    cols 18-19  mean and std of neighbour height along the normal over 2k
                neighbours (voxel units)
    cols 20-    zero padding
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud, PointCloudError, local_covariances

DEFAULT_VOXEL_SIZE = 0.03
DEFAULT_FEATURE_DIM = 32
DEFAULT_K = 16
USED_DIMS = 20

VOXEL_OFFSET_COLS = slice(0, 3)
NORMAL_COLS = slice(3, 6)
EIGEN_COLS = [6, 7, 8, 12, 13, 14, 15, 16, 17]


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: float
    voxel_coords: np.ndarray  # (N_V, 3) int
    point_to_voxel: np.ndarray  # (N,)
    voxel_to_points: tuple  # N_V arrays of point indices

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_coords)


def voxelize(cloud: PointCloud, voxel_size: float = DEFAULT_VOXEL_SIZE) -> VoxelGrid:
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise PointCloudError("non-finite coordinates")
    q = np.floor(pts / voxel_size).astype(np.int64)
    coords, inverse = np.unique(q, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(coords) + 1))
    groups = tuple(np.split(order, bounds[1:-1]))
    return VoxelGrid(float(voxel_size), coords, inverse, groups)


def eigen_descriptors(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Linearity, planarity, sphericity from sorted covariance eigenvalues."""
    ev = np.linalg.eigvalsh(local_covariances(points, neighbors))
    l3, l2, l1 = ev[:, 0], ev[:, 1], ev[:, 2]
    l3 = np.maximum(l3, 0.0)
    denom = np.where(l1 > 1e-300, l1, 1.0)
    out = np.column_stack([(l1 - l2) / denom, (l2 - l3) / denom, l3 / denom])
    out[l1 <= 1e-300] = 0.0
    return out


def _row_stats(points, normals, nbr, k):
    """Scale-free eigen descriptors plus raw distance/height statistics.

    Returns (eig (n, 9), dist (n, 2), height (n, 2)); lengths in input units.
    """
    k2 = min(2 * k, nbr.shape[1])
    eig = np.hstack(
        [
            eigen_descriptors(points, nbr[:, :k]),
            eigen_descriptors(points, nbr[:, :k2]),
            eigen_descriptors(points, nbr),
        ]
    )
    rel = points[nbr[:, 1:k2]] - points[nbr[:, :1]]
    d = np.linalg.norm(rel[:, : k - 1], axis=2)
    h = np.einsum("nkj,nj->nk", rel, normals[nbr[:, 0]])
    return eig, np.column_stack([d.mean(axis=1), d.std(axis=1)]), np.column_stack([h.mean(axis=1), h.std(axis=1)])


def _neighbors(points, k4, rows=None):
    tree = cKDTree(points)
    q = points if rows is None else points[rows]
    _, nbr = tree.query(q, k=k4)
    nbr = nbr.reshape(len(q), k4)
    own = np.arange(len(points)) if rows is None else rows
    # the query point itself leads every row, even among duplicates
    first = nbr[:, 0] != own
    if np.any(first):
        for r in np.flatnonzero(first):
            row = nbr[r]
            pos = np.flatnonzero(row == own[r])
            rest = row[row != own[r]]
            nbr[r] = np.concatenate([[own[r]], rest if len(pos) else rest[:-1]])
    return nbr


def _voxel_columns(points, grid, k):
    counts = np.bincount(grid.point_to_voxel, minlength=grid.n_voxels)
    sums = np.zeros((grid.n_voxels, 3))
    np.add.at(sums, grid.point_to_voxel, points)
    centroids = sums / counts[:, None]
    offs = (points - centroids[grid.point_to_voxel]) / grid.voxel_size
    return offs, counts[grid.point_to_voxel] / k


def _assemble(points, normals, grid, k, dim, eig, dist, height):
    vs = grid.voxel_size
    G = np.zeros((len(points), dim))
    G[:, VOXEL_OFFSET_COLS], G[:, 11] = _voxel_columns(points, grid, k)
    G[:, NORMAL_COLS] = normals
    G[:, 6:9] = eig[:, 0:3]
    G[:, 9:11] = dist / vs
    G[:, 12:18] = eig[:, 3:9]
    G[:, 18:20] = height / vs
    return G


def _check_args(cloud, k, dim):
    if cloud.normals is None:
        raise PointCloudError("feature extraction needs normals")
    if k < 4:
        raise ValueError("k must be >= 4")
    if k > len(cloud):
        raise ValueError(f"k={k} exceeds point count {len(cloud)}")
    if dim < USED_DIMS:
        raise ValueError(f"feature dim must be >= {USED_DIMS}")


def extract_features(
    cloud: PointCloud,
    grid: VoxelGrid,
    k: int = DEFAULT_K,
    dim: int = DEFAULT_FEATURE_DIM,
) -> np.ndarray:
    """Per-point feature matrix of shape (N, dim)."""
    _check_args(cloud, k, dim)
    pts, nrm = cloud.points, cloud.normals
    nbr = _neighbors(pts, min(4 * k, len(pts)))
    eig, dist, height = _row_stats(pts, nrm, nbr, k)
    return _assemble(pts, nrm, grid, k, dim, eig, dist, height)


def cloud_features(cloud, voxel_size=DEFAULT_VOXEL_SIZE, k=DEFAULT_K, dim=DEFAULT_FEATURE_DIM):
    return extract_features(cloud, voxelize(cloud, voxel_size), k=k, dim=dim)


class NeighborhoodCache:
    """k-NN graph and neighbourhood statistics of a reference cloud.

    Neighbourhood order is unchanged by rotation, translation and uniform
    scaling, so features of a similarity-transformed copy with a few moved
    points only need the rows whose neighbourhoods the moved points touch.
    """

    def __init__(self, cloud: PointCloud, k: int = DEFAULT_K):
        _check_args(cloud, k, USED_DIMS)
        self.k = k
        self.k4 = min(4 * k, len(cloud))
        self.n = len(cloud)
        self.nbr = _neighbors(cloud.points, self.k4)
        self.eig, self.dist, self.height = _row_stats(cloud.points, cloud.normals, self.nbr, k)
        rel = cloud.points[self.nbr[:, -1]] - cloud.points
        self.radius = np.linalg.norm(rel, axis=1)

    def features(
        self,
        cloud: PointCloud,
        grid: VoxelGrid,
        scale: float,
        moved: np.ndarray,
        dim: int = DEFAULT_FEATURE_DIM,
    ) -> np.ndarray:
        """Features of `cloud`, which must equal the reference cloud under a
        rotation plus translation, divided by `scale`, except at indices `moved`."""
        _check_args(cloud, self.k, dim)
        if len(cloud) != self.n:
            raise ValueError("cloud does not match the cached reference")
        pts, nrm = cloud.points, cloud.normals
        moved = np.asarray(moved, dtype=np.int64)
        eig = self.eig.copy()
        dist = self.dist / scale
        height = self.height / scale
        if len(moved):
            touched = np.zeros(self.n, dtype=bool)
            touched[moved] = True
            stale = touched[self.nbr].any(axis=1) | touched
            diff = pts[:, None, :] - pts[None, moved, :]
            closest = np.sqrt(np.einsum("nmj,nmj->nm", diff, diff).min(axis=1))
            # a moved point may now fall inside an untouched neighbourhood
            stale |= closest <= self.radius / scale * (1 + 1e-9)
            rows = np.flatnonzero(stale)
            nbr = _neighbors(pts, self.k4, rows)
            e, d, h = _row_stats(pts, nrm, nbr, self.k)
            eig[rows], dist[rows], height[rows] = e, d, h
        return _assemble(pts, nrm, grid, self.k, dim, eig, dist, height)
