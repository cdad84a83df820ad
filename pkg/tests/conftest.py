import numpy as np
import pytest
from hypothesis import settings

from offsetad.pointcloud import PointCloud

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def sphere_cloud(n=256, seed=0, radius=1.0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return PointCloud(radius * d, d, "sphere")


def brute_knn(points, subset, q, k):
    """Exhaustive scan, ties by lower index."""
    subset = np.asarray(sorted(subset))
    d = np.sqrt(((points[subset] - q) ** 2).sum(axis=1))
    order = np.lexsort((subset, d))
    return subset[order[:k]]


@pytest.fixture
def sphere():
    return sphere_cloud()
