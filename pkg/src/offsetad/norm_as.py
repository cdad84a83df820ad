"""Pseudo-anomaly synthesis by displacing one patch along its normals.

A cloud is split into J patches, each grown from a random seed point by
taking its nearest not-yet-assigned neighbours. One patch is then pushed
out (bulge) or in (concavity) along the per-point normals, with the seed
moving furthest and the patch rim not at all:

    p_hat = p + alpha * n * (1 - w) * beta

where w is each point's distance to the seed divided by the largest such
distance in the patch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .pointcloud import PointCloud, PointCloudError

DEFAULT_PATCHES = 64
DEFAULT_BETA_RANGE = (0.06, 0.12)


@dataclass(frozen=True)
class PatchPartition:
    assignments: np.ndarray  # (N,) patch id per point
    seeds: np.ndarray  # (J,) seed point index per patch
    J: int
    patch_size: int  # nominal N_h = N // J

    def members(self, patch_id: int) -> np.ndarray:
        """Point indices of a patch, seed first, then in order of addition."""
        return self._members[patch_id]

    def __post_init__(self):
        groups = []
        for b in range(self.J):
            idx = np.flatnonzero(self.assignments == b)
            seed = self.seeds[b]
            groups.append(np.concatenate([[seed], idx[idx != seed]]))
        object.__setattr__(self, "_members", groups)


@dataclass(frozen=True)
class Draw:
    patch_id: int
    alpha: int
    beta: float
    direction: Optional[tuple] = None  # set for the random-direction variant


@dataclass(frozen=True)
class PseudoAnomalySample:
    cloud: PointCloud
    gt_offsets: np.ndarray
    anomaly_mask: np.ndarray
    draw: Draw

    @property
    def point_labels(self) -> np.ndarray:
        """Points that actually moved; the rim of a patch (w = 1) does not."""
        return np.linalg.norm(self.gt_offsets, axis=1) > 1e-9


def partition_patches(cloud: PointCloud, J: int, rng: np.random.Generator) -> PatchPartition:
    n = len(cloud)
    if J < 1:
        raise ValueError("J must be >= 1")
    if J > n:
        raise PointCloudError(f"cannot split {n} points into {J} patches")
    size = n // J
    pts = cloud.points
    assign = np.full(n, -1, dtype=np.int64)
    seeds = np.empty(J, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    for b in range(J):
        remaining = np.flatnonzero(free)
        seed = remaining[rng.integers(len(remaining))]
        seeds[b] = seed
        if b == J - 1:
            # last patch takes whatever is left (N mod J extra points)
            chosen = remaining
        else:
            diff = pts[remaining] - pts[seed]
            d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            chosen = remaining[_smallest(d, size)]
        assign[chosen] = b
        free[chosen] = False
    return PatchPartition(assign, seeds, J, size)


def _smallest(d: np.ndarray, m: int) -> np.ndarray:
    """Positions of the m smallest values; equal values resolve to the lower position."""
    if m >= len(d):
        return np.argsort(d, kind="stable")
    kth = np.partition(d, m - 1)[m - 1]
    cand = np.flatnonzero(d <= kth)
    return cand[np.argsort(d[cand], kind="stable")[:m]]


def patch_weights(cloud: PointCloud, partition: PatchPartition, patch_id: int) -> np.ndarray:
    """Normalised seed distance for each member, ordered as `partition.members`."""
    members = partition.members(patch_id)
    return _weights(cloud.points, members)


def _weights(points: np.ndarray, members: np.ndarray) -> np.ndarray:
    center = points[members[0]]
    diff = points[members] - center
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    dmax = d.max()
    if dmax <= 0:
        return np.zeros(len(members))
    return d / dmax


def displace_patch(
    cloud: PointCloud,
    members: np.ndarray,
    weights: np.ndarray,
    directions: np.ndarray,
    alpha: int,
    beta: float,
    draw: Draw,
) -> PseudoAnomalySample:
    """Move `members` by alpha * direction * (1 - w) * beta.

    `directions` is either (len(members), 3) or a single 3-vector.
    """
    pts = np.array(cloud.points)
    dirs = np.broadcast_to(np.asarray(directions, dtype=np.float64), (len(members), 3))
    pts[members] = pts[members] + alpha * dirs * ((1.0 - weights) * beta)[:, None]
    out = cloud.replace(points=pts)
    offsets = out.points - cloud.points
    mask = np.zeros(len(cloud), dtype=bool)
    mask[members] = True
    return PseudoAnomalySample(out, offsets, mask, draw)


def _draw_patch(cloud, J, beta_range, rng):
    lo, hi = beta_range
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid beta range {beta_range}")
    partition = partition_patches(cloud, J, rng)
    patch_id = int(rng.integers(J))
    alpha = int(rng.choice([-1, 1]))
    beta = float(rng.uniform(lo, hi))
    members = partition.members(patch_id)
    return partition, patch_id, alpha, beta, members


def generate_pseudo_anomaly(
    cloud: PointCloud,
    J: int = DEFAULT_PATCHES,
    beta_range: Sequence[float] = DEFAULT_BETA_RANGE,
    rng: Optional[np.random.Generator] = None,
) -> PseudoAnomalySample:
    """Bulge or dent one random patch along its normals."""
    if cloud.normals is None:
        raise PointCloudError("cloud has no normals; run estimate_normals first")
    rng = rng if rng is not None else np.random.default_rng()
    _, patch_id, alpha, beta, members = _draw_patch(cloud, J, beta_range, rng)
    w = _weights(cloud.points, members)
    return displace_patch(
        cloud, members, w, cloud.normals[members], alpha, beta, Draw(patch_id, alpha, beta)
    )


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def generate_random_direction_anomaly(
    cloud: PointCloud,
    J: int = DEFAULT_PATCHES,
    beta_range: Sequence[float] = DEFAULT_BETA_RANGE,
    rng: Optional[np.random.Generator] = None,
) -> PseudoAnomalySample:
    """Same as `generate_pseudo_anomaly`, but the whole patch moves along one random direction."""
    rng = rng if rng is not None else np.random.default_rng()
    _, patch_id, alpha, beta, members = _draw_patch(cloud, J, beta_range, rng)
    u = random_unit_vector(rng)
    w = _weights(cloud.points, members)
    return displace_patch(cloud, members, w, u, alpha, beta, Draw(patch_id, alpha, beta, tuple(u)))
