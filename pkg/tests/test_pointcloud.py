import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from offsetad.pointcloud import (
    DegenerateError,
    KnnIndex,
    ParseError,
    PointCloud,
    PointCloudError,
    add_gaussian_noise,
    estimate_normals,
    knn_query,
    load_cloud,
    normalize,
    parse_obj,
    parse_ply,
    random_rotation,
    random_rotation_matrix,
    rotate,
    serialize_obj,
    serialize_ply,
    serialize_score_csv,
)

from .conftest import brute_knn, sphere_cloud

coords = arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)),
                elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False))


def test_cloud_rejects_bad_input():
    with pytest.raises(PointCloudError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(PointCloudError):
        PointCloud(np.array([[0, 0, np.nan]]))
    with pytest.raises(PointCloudError):
        PointCloud(np.zeros((1, 3)), np.array([[0, 0, 2.0]]))
    c = PointCloud(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


# --- OBJ ---------------------------------------------------------------


def test_obj_points_without_normals():
    c = parse_obj(b"v 0 0 1\nv 1 0 0\n")
    assert len(c) == 2 and c.normals is None
    np.testing.assert_array_equal(c.points, [[0, 0, 1], [1, 0, 0]])


def test_obj_normal_renormalized():
    c = parse_obj("v 0 0 0\nvn 0 0 2\n")
    np.testing.assert_array_equal(c.normals, [[0, 0, 1]])


def test_obj_count_mismatch_drops_normals():
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvn 0 0 1\nf 1 2 3\n"
    c = parse_obj(text)
    assert len(c) == 3 and c.normals is None


def test_obj_errors_carry_line_number():
    with pytest.raises(ParseError) as exc:
        parse_obj("# header\nv 0 0 0\nv 1 x 0\n")
    assert exc.value.line == 3
    with pytest.raises(PointCloudError):
        parse_obj("# nothing here\nf 1 2 3\n")


@given(coords)
def test_obj_round_trip(pts):
    c = parse_obj(serialize_obj(PointCloud(pts)))
    again = parse_obj(serialize_obj(c))
    np.testing.assert_array_equal(c.points, pts)
    np.testing.assert_array_equal(again.points, c.points)


def test_obj_round_trip_with_normals(sphere):
    c = parse_obj(serialize_obj(sphere))
    np.testing.assert_array_equal(c.points, sphere.points)
    np.testing.assert_allclose(c.normals, sphere.normals, atol=1e-15)


# --- PLY / CSV ---------------------------------------------------------------


def test_ply_round_trip_with_scores(sphere):
    scores = np.linspace(0, 1, len(sphere))
    c, s = parse_ply(serialize_ply(sphere, scores))
    np.testing.assert_array_equal(c.points, sphere.points)
    np.testing.assert_allclose(c.normals, sphere.normals, atol=1e-15)
    np.testing.assert_array_equal(s, scores)
    c2, s2 = parse_ply(serialize_ply(PointCloud(sphere.points)))
    assert c2.normals is None and s2 is None


def test_ply_header_has_score_channel(sphere):
    head = serialize_ply(sphere, np.zeros(len(sphere))).split(b"end_header")[0]
    assert b"property double anomaly_score" in head
    assert b"format ascii 1.0" in head


def test_ply_rejects_binary():
    with pytest.raises(PointCloudError):
        parse_ply(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n")


def test_score_csv_six_significant_digits():
    c = PointCloud(np.array([[1.23456789, 0.0, -2.0]]))
    assert serialize_score_csv(c, [0.123456789]) == b"x,y,z,score\n1.23457,0,-2,0.123457\n"


def test_load_cloud_dispatch(tmp_path, sphere):
    (tmp_path / "a.ply").write_bytes(serialize_ply(sphere))
    (tmp_path / "a.obj").write_bytes(serialize_obj(sphere))
    (tmp_path / "a.xyz").write_text("0 0 0\n")
    assert len(load_cloud(tmp_path / "a.ply")) == len(sphere)
    assert len(load_cloud(tmp_path / "a.obj")) == len(sphere)
    with pytest.raises(PointCloudError):
        load_cloud(tmp_path / "a.xyz")


# --- normalize -----------------------------------------------------------------


@pytest.mark.parametrize(
    "pts, want",
    [
        ([[-1, 0, 0], [1, 0, 0]], [[-1, 0, 0], [1, 0, 0]]),
        ([[0, 0, 0], [0, 4, 0]], [[0, -1, 0], [0, 1, 0]]),
        ([[2, 0, 0], [4, 0, 0]], [[-1, 0, 0], [1, 0, 0]]),
    ],
)
def test_normalize_examples(pts, want):
    np.testing.assert_allclose(normalize(PointCloud(np.array(pts, float))).points, want, atol=1e-15)


def test_normalize_degenerate():
    with pytest.raises(DegenerateError):
        normalize(PointCloud(np.ones((5, 3))))


def _spread(pts):
    return np.ptp(pts, axis=0).max() > 1e-3 * max(1.0, np.abs(pts).max())


@given(coords, st.floats(0.01, 100))
def test_normalize_properties(pts, s):
    if not _spread(pts):
        return
    c = PointCloud(pts)
    n = normalize(c)
    assert np.abs(n.points.mean(axis=0)).max() < 1e-9
    assert abs(np.abs(n.points).max() - 1.0) < 1e-12
    np.testing.assert_allclose(normalize(n).points, n.points, atol=1e-9)
    np.testing.assert_allclose(normalize(PointCloud(pts * s)).points, n.points, atol=1e-9)


# --- rotation / noise -----------------------------------------------------------


def test_identity_rotation_is_noop(sphere):
    r = rotate(sphere, np.eye(3))
    np.testing.assert_array_equal(r.points, sphere.points)


@given(st.integers(0, 2**32 - 1))
def test_rotation_isometry(seed):
    c = sphere_cloud(40, seed % 7)
    r = random_rotation(c, np.random.default_rng(seed))
    d0 = np.linalg.norm(c.points[:, None] - c.points[None], axis=2)
    d1 = np.linalg.norm(r.points[:, None] - r.points[None], axis=2)
    np.testing.assert_allclose(d1, d0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(r.normals, axis=1), 1.0, atol=1e-9)


def test_rotation_matrix_is_proper():
    R = random_rotation_matrix(np.random.default_rng(3))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_noise_zero_sigma_identical(sphere):
    out = add_gaussian_noise(sphere, 0.0, np.random.default_rng(0))
    assert out.points.tobytes() == sphere.points.tobytes()


def test_noise_statistics():
    c = PointCloud(np.zeros((10000, 3)))
    out = add_gaussian_noise(c, 0.005, np.random.default_rng(1))
    std = out.points.std(axis=0)
    assert np.all((std > 0.0045) & (std < 0.0055))
    out = add_gaussian_noise(c, 0.003, np.random.default_rng(2))
    mean_mag = np.linalg.norm(out.points, axis=1).mean()
    # chi distribution with 3 dof
    assert mean_mag == pytest.approx(0.003 * np.sqrt(8 / np.pi), rel=0.1)


def test_noise_negative_sigma(sphere):
    with pytest.raises(ValueError):
        add_gaussian_noise(sphere, -0.1, np.random.default_rng(0))


# --- normals -----------------------------------------------------------------------


def test_planar_normals():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, (60, 2)), np.zeros(60)])
    est = estimate_normals(PointCloud(pts), k=8)
    np.testing.assert_allclose(np.abs(est.cloud.normals[:, 2]), 1.0, atol=1e-9)
    radial = pts - pts.mean(axis=0)
    assert np.all(np.einsum("ij,ij->i", est.cloud.normals, radial) >= 0)


def test_sphere_normals_within_10_degrees():
    c = sphere_cloud(2000, 4)
    est = estimate_normals(PointCloud(c.points), k=8)
    cos = np.einsum("ij,ij->i", est.cloud.normals, c.normals)
    assert np.mean(cos > np.cos(np.radians(10))) >= 0.99


def test_collinear_points_flagged():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    est = estimate_normals(PointCloud(pts), k=3)
    assert est.degenerate.all()
    np.testing.assert_allclose(np.linalg.norm(est.cloud.normals, axis=1), 1.0)


def test_estimate_normals_k_bounds(sphere):
    with pytest.raises(ValueError):
        estimate_normals(sphere, k=2)
    with pytest.raises(ValueError):
        estimate_normals(sphere, k=len(sphere) + 1)


# --- kNN ------------------------------------------------------------------------------


def test_knn_examples():
    c = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [5, 0, 0]], float))
    idx = KnnIndex(c)
    assert knn_query(idx, [0.1, 0, 0], 2).tolist() == [0, 1]
    assert knn_query(idx, [4.0, 0, 0], 10).tolist() == [2, 1, 0]


def test_knn_ties_lower_index_first():
    c = PointCloud(np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 3]], float))
    assert knn_query(KnnIndex(c), [0, 0, 0], 2).tolist() == [0, 1]
    assert knn_query(KnnIndex(c, [2, 1]), [0, 0, 0], 1).tolist() == [1]


def test_knn_empty_subset():
    with pytest.raises(PointCloudError):
        knn_query(KnnIndex(PointCloud(np.zeros((2, 3))), []), [0, 0, 0], 1)


def test_knn_matches_brute_force_1000_queries():
    rng = np.random.default_rng(5)
    # coarse grid coordinates force many exact ties
    pts = rng.integers(-6, 7, size=(2000, 3)).astype(float) / 4
    c = PointCloud(pts)
    subset = rng.choice(2000, size=1500, replace=False)
    idx = KnnIndex(c, subset)
    for _ in range(1000):
        q = rng.integers(-6, 7, size=3) / 4 + rng.choice([0, 0.125], size=3)
        k = int(rng.integers(1, 30))
        np.testing.assert_array_equal(knn_query(idx, q, k), brute_knn(pts, subset, q, k))
