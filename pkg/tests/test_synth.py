import numpy as np
import pytest

from offsetad.pointcloud import PointCloud, estimate_normals
from offsetad.synth import SHAPES, LabeledInstance, SynthCategory, build_benchmark, sample_shape


def test_sphere_is_analytic():
    cat = SynthCategory("sphere", n_points=500)
    c = sample_shape(cat, np.random.default_rng(0))
    r = np.linalg.norm(c.points, axis=1)
    assert np.all(np.abs(r - 1) <= 0.02 + 1e-12)
    np.testing.assert_allclose(c.normals, c.points / r[:, None], atol=1e-15)


def test_cylinder_side_normals_perpendicular():
    cat = SynthCategory("cylinder", n_points=800)
    c = sample_shape(cat, np.random.default_rng(1))
    side = np.abs(c.normals[:, 2]) < 0.5
    assert side.sum() > 100
    assert np.abs(c.normals[side, 2]).max() <= 1e-9


@pytest.mark.parametrize("kind", SHAPES)
def test_shapes_valid_and_deterministic(kind):
    cat = SynthCategory(kind, n_points=400)
    a = sample_shape(cat, np.random.default_rng(2))
    b = sample_shape(cat, np.random.default_rng(2))
    assert a.points.tobytes() == b.points.tobytes()
    np.testing.assert_allclose(np.linalg.norm(a.normals, axis=1), 1.0, atol=1e-12)
    # outward: away from the centre, or from the tube's core circle on a torus
    ref = a.points
    if kind == "torus":
        core = a.points.copy()
        core[:, 2] = 0
        core *= (0.7 / np.linalg.norm(core[:, :2], axis=1))[:, None]
        ref = a.points - core
    assert np.mean(np.einsum("ij,ij->i", a.normals, ref) > 0) > 0.95


def test_torus_area_uniform():
    cat = SynthCategory("torus", n_points=20000, jitter=0.0)
    c = sample_shape(cat, np.random.default_rng(3))
    ring = np.linalg.norm(c.points[:, :2], axis=1)
    outer = np.mean(ring > 0.7)
    # outer half of the tube has area share (pi R + 2 r) / (2 pi R)
    want = (np.pi * 0.7 + 2 * 0.3) / (2 * np.pi * 0.7)
    assert outer == pytest.approx(want, abs=0.02)


def test_invalid_categories():
    with pytest.raises(ValueError):
        SynthCategory("cube")
    with pytest.raises(ValueError):
        SynthCategory("torus", params={"major": 0.2, "minor": 0.3})
    with pytest.raises(ValueError):
        SynthCategory(anomaly_fraction=1.0)
    with pytest.raises(ValueError):
        SynthCategory(n_points=10, patches=64)
    with pytest.raises(ValueError):
        SynthCategory("sphere", params={"height": 1})


def test_benchmark_counts_and_labels():
    b = build_benchmark(SynthCategory(n_points=300, test_count=40, patches=16))
    assert len(b.train) == 4 and len(b.test) == 40
    obj = [l.object_label for l in b.labels]
    assert sum(obj) == 20
    for c, l, d in zip(b.test, b.labels, b.draws):
        assert len(l.point_labels) == len(c)
        if l.object_label:
            assert l.point_labels.any() and d is not None
            assert 0.05 <= d.beta <= 0.14
        else:
            assert not l.point_labels.any() and d is None
    assert all(isinstance(c, PointCloud) for c in b.train)


def test_benchmark_streams():
    cat = SynthCategory(n_points=200, train_count=2, test_count=6, patches=8)
    a, b = build_benchmark(cat), build_benchmark(cat)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert x.points.tobytes() == y.points.tobytes()
    other = build_benchmark(SynthCategory(n_points=200, train_count=2, test_count=6, patches=8, test_seed=99))
    for x, y in zip(a.train, other.train):
        assert x.points.tobytes() == y.points.tobytes()
    assert any(x.points.tobytes() != y.points.tobytes() for x, y in zip(a.test, other.test))


def test_labeled_instance_consistency():
    with pytest.raises(ValueError):
        LabeledInstance(0, np.array([True, False]))
    with pytest.raises(ValueError):
        LabeledInstance(1, np.array([False, False]))
    LabeledInstance(1, None)


def test_estimated_normals_match_analytic():
    c = sample_shape(SynthCategory(n_points=2048), np.random.default_rng(5))
    est = estimate_normals(PointCloud(c.points), k=8).cloud
    cos = np.einsum("ij,ij->i", est.normals, c.normals)
    assert np.mean(cos >= np.cos(np.radians(10))) >= 0.99
