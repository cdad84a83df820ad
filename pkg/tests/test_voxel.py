import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from offsetad.offset_net import TrainConfig, make_training_sample
from offsetad.pointcloud import PointCloud, PointCloudError, normalize
from offsetad.voxel import (
    EIGEN_COLS,
    USED_DIMS,
    NeighborhoodCache,
    cloud_features,
    eigen_descriptors,
    extract_features,
    voxelize,
)

from .conftest import sphere_cloud


def test_voxelize_examples():
    assert voxelize(PointCloud(np.array([[0.01, 0, 0], [0.02, 0, 0]])), 0.03).n_voxels == 1
    assert voxelize(PointCloud(np.array([[0.01, 0, 0], [0.05, 0, 0]])), 0.03).n_voxels == 2
    # floor, not round: -0.01 and 0.01 straddle zero
    straddle = voxelize(PointCloud(np.array([[-0.01, 0, 0], [0.01, 0, 0]])), 5.0)
    assert straddle.n_voxels == 2
    assert voxelize(PointCloud(np.array([[0.1, 0.2, 0.3], [0.9, 0.9, 0.9]])), 5.0).n_voxels == 1


def test_voxelize_rejects_bad_size(sphere):
    with pytest.raises(ValueError):
        voxelize(sphere, 0.0)


@given(st.integers(0, 1000), st.floats(0.01, 0.5))
def test_voxel_grid_invariants(seed, size):
    c = normalize(sphere_cloud(200, seed))
    g = voxelize(c, size)
    assert g.n_voxels <= len(c)
    np.testing.assert_array_equal(g.voxel_coords[g.point_to_voxel], np.floor(c.points / size).astype(int))
    assert len({tuple(v) for v in g.voxel_coords}) == g.n_voxels
    allpts = np.sort(np.concatenate(g.voxel_to_points))
    np.testing.assert_array_equal(allpts, np.arange(len(c)))
    for i in range(len(c)):
        assert i in g.voxel_to_points[g.point_to_voxel[i]]


def test_planar_descriptors():
    g = np.linspace(-1, 1, 9)
    x, y = np.meshgrid(g, g)
    pts = np.column_stack([x.ravel(), y.ravel(), np.zeros(81)])
    nbr = np.tile(np.arange(81), (81, 1))
    d = eigen_descriptors(pts, nbr)
    np.testing.assert_allclose(d[:, 1], 1.0, atol=1e-12)
    np.testing.assert_allclose(d[:, 2], 0.0, atol=1e-12)


def test_feature_layout(sphere):
    c = normalize(sphere)
    G = cloud_features(c, 0.03, k=16, dim=32)
    assert G.shape == (len(c), 32)
    assert np.all(np.isfinite(G))
    np.testing.assert_array_equal(G[:, 3:6], c.normals)
    np.testing.assert_array_equal(G[:, USED_DIMS:], 0.0)
    np.testing.assert_array_equal(G, cloud_features(c, 0.03, k=16, dim=32))


def test_lonely_point_count_feature():
    c = normalize(sphere_cloud(64, 1))
    G = cloud_features(c, 1e-4, k=8)
    np.testing.assert_allclose(G[:, 11], 1 / 8)


def test_feature_arg_errors(sphere):
    with pytest.raises(PointCloudError):
        cloud_features(PointCloud(sphere.points))
    with pytest.raises(ValueError):
        cloud_features(sphere, k=3)
    with pytest.raises(ValueError):
        cloud_features(PointCloud(sphere.points[:10], sphere.normals[:10]), k=16)


def test_translation_leaves_descriptors():
    c = normalize(sphere_cloud(150, 2))
    shift = PointCloud(c.points + 0.03 * np.array([7, -3, 11]), c.normals)
    a = cloud_features(c, 0.03, k=8)
    b = cloud_features(shift, 0.03, k=8)
    np.testing.assert_allclose(b[:, EIGEN_COLS], a[:, EIGEN_COLS], atol=1e-9)


def _nbr_sets(points, k4):
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    return np.argsort(d, axis=1, kind="stable")[:, :k4]


@given(st.integers(0, 199), st.integers(0, 10**6))
def test_feature_locality(i, seed):
    k = 4
    c = normalize(sphere_cloud(200, 3))
    rng = np.random.default_rng(seed)
    pts = c.points.copy()
    pts[i] += rng.normal(scale=0.05, size=3)
    moved = PointCloud(pts, c.normals)
    a = extract_features(c, voxelize(c, 0.03), k=k)
    b = extract_features(moved, voxelize(moved, 0.03), k=k)
    changed = np.flatnonzero(np.any(a != b, axis=1))
    near = (_nbr_sets(c.points, 4 * k) == i).any(axis=1) | (_nbr_sets(pts, 4 * k) == i).any(axis=1)
    near[i] = True
    assert set(changed) <= set(np.flatnonzero(near))


@pytest.mark.parametrize("variant", ["full", "random_direction"])
def test_cache_matches_fresh_path(variant):
    c = sphere_cloud(400, 5, radius=1.7)
    cfg = TrainConfig(patches=16, variant=variant)
    cache = NeighborhoodCache(c, cfg.k)
    for s in range(4):
        s1, f1 = make_training_sample(c, cfg, np.random.default_rng(s), cache)
        s2, f2 = make_training_sample(c, cfg, np.random.default_rng(s))
        np.testing.assert_array_equal(s1.cloud.points, s2.cloud.points)
        np.testing.assert_allclose(f1, f2, rtol=0, atol=1e-12)
