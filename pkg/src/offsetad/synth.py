"""Synthetic categories with analytic normals, and labelled test sets.

Every shape is sampled uniformly by surface area: each surface piece is
chosen with probability proportional to its area, then sampled through a
parametrisation whose density is corrected to be area-uniform (sqrt for
discs, rejection on the tube angle for the torus).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .norm_as import generate_pseudo_anomaly
from .pointcloud import PointCloud, normalize

SHAPES = ("sphere", "cylinder", "torus", "capsule")

DEFAULT_SHAPE_PARAMS = {
    "sphere": {"radius": 1.0},
    "cylinder": {"radius": 0.5, "height": 1.6},
    "torus": {"major": 0.7, "minor": 0.3},
    "capsule": {"radius": 0.4, "length": 1.0},
}

STREAM_TRAIN, STREAM_TEST_SHAPE, STREAM_TEST_ANOMALY, STREAM_TEST_ORDER = 10, 11, 12, 13


@dataclass
class SynthCategory:
    kind: str = "sphere"
    params: dict = field(default_factory=dict)
    n_points: int = 2048
    train_count: int = 4
    test_count: int = 40
    anomaly_fraction: float = 0.5
    seed: int = 0
    test_seed: Optional[int] = None  # defaults to `seed`
    patches: int = 64
    beta_range: tuple = (0.05, 0.14)
    jitter: float = 0.02

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape {self.kind!r}; expected one of {SHAPES}")
        merged = dict(DEFAULT_SHAPE_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        if any(v <= 0 for v in merged.values()):
            raise ValueError("shape parameters must be positive")
        if self.kind == "torus" and merged["minor"] >= merged["major"]:
            raise ValueError("torus minor radius must be below the major radius")
        self.params = merged
        self.beta_range = tuple(float(b) for b in self.beta_range)
        if self.n_points < self.patches:
            raise ValueError("n_points must be at least the patch count")
        if not 0 < self.anomaly_fraction < 1:
            raise ValueError("anomaly_fraction must lie in (0, 1)")
        if self.train_count < 1 or self.test_count < 2:
            raise ValueError("need at least one train cloud and two test clouds")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def effective_test_seed(self) -> int:
        return self.seed if self.test_seed is None else self.test_seed


# ---------------------------------------------------------------------------
# surface samplers: each returns (points, normals)
# ---------------------------------------------------------------------------


def _sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, n, radius):
    d = _sphere_dirs(rng, n)
    return radius * d, d


def _disc(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _sample_cylinder(rng, n, radius, height):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    piece = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    s = piece == 0
    t = rng.uniform(0, 2 * np.pi, size=s.sum())
    pts[s] = np.column_stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, size=s.sum())])
    nrm[s] = np.column_stack([np.cos(t), np.sin(t), np.zeros_like(t)])
    for which, z in ((1, height / 2), (2, -height / 2)):
        m = piece == which
        x, y = _disc(rng, m.sum(), radius)
        pts[m] = np.column_stack([x, y, np.full_like(x, z)])
        nrm[m, 2] = np.sign(z)
    return pts, nrm


def _sample_torus(rng, n, major, minor):
    # tube angle density proportional to (major + minor cos theta)
    theta = np.empty(0)
    while len(theta) < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) * (major + minor) <= major + minor * np.cos(cand)
        theta = np.concatenate([theta, cand[keep]])
    theta = theta[:n]
    phi = rng.uniform(0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(theta)
    pts = np.column_stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)])
    nrm = np.column_stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)])
    return pts, nrm


def _sample_capsule(rng, n, radius, length):
    side = 2 * np.pi * radius * length
    caps = 4 * np.pi * radius**2
    on_side = rng.uniform(size=n) < side / (side + caps)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    m = on_side.sum()
    t = rng.uniform(0, 2 * np.pi, size=m)
    pts[on_side] = np.column_stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-length / 2, length / 2, size=m)])
    nrm[on_side] = np.column_stack([np.cos(t), np.sin(t), np.zeros_like(t)])
    d = _sphere_dirs(rng, n - m)
    shift = np.where(d[:, 2] >= 0, length / 2, -length / 2)
    pts[~on_side] = radius * d + np.column_stack([np.zeros_like(shift), np.zeros_like(shift), shift])
    nrm[~on_side] = d
    return pts, nrm


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "capsule": _sample_capsule,
}


def sample_shape(category: SynthCategory, rng: np.random.Generator) -> PointCloud:
    """One normal instance: area-uniform surface points with analytic outward normals.

    Each shape parameter is scaled by an independent factor in
    [1 - jitter, 1 + jitter] to mimic variation within a category.
    """
    params = {
        k: v * (1.0 + rng.uniform(-category.jitter, category.jitter))
        for k, v in sorted(category.params.items())
    }
    pts, nrm = _SAMPLERS[category.kind](rng, category.n_points, **params)
    return PointCloud(pts, nrm, category.name)


@dataclass(frozen=True)
class LabeledInstance:
    object_label: int
    point_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.object_label not in (0, 1):
            raise ValueError("object_label must be 0 or 1")
        if self.point_labels is not None:
            labels = np.asarray(self.point_labels, dtype=bool)
            if bool(labels.any()) != bool(self.object_label):
                raise ValueError("object label disagrees with point labels")
            object.__setattr__(self, "point_labels", labels)


@dataclass
class Benchmark:
    category: SynthCategory
    train: list
    test: list
    labels: list
    draws: list  # Draw per test instance, None for normal ones


def _rng(seed, stream, i):
    return np.random.default_rng([int(seed), stream, i])


def build_benchmark(category: SynthCategory) -> Benchmark:
    """Normal-only training clouds plus a labelled test set.

    Train clouds come from stream (seed, 10, i). Test clouds come from
    (test_seed, 11, i); anomalies are injected with (test_seed, 12, i) and
    the anomalous positions are chosen with (test_seed, 13, 0).
    """
    train = [sample_shape(category, _rng(category.seed, STREAM_TRAIN, i)) for i in range(category.train_count)]
    ts = category.effective_test_seed
    n_anom = int(round(category.anomaly_fraction * category.test_count))
    n_anom = min(max(n_anom, 1), category.test_count - 1)
    anomalous = np.zeros(category.test_count, dtype=bool)
    anomalous[_rng(ts, STREAM_TEST_ORDER, 0).permutation(category.test_count)[:n_anom]] = True

    test, labels, draws = [], [], []
    for i in range(category.test_count):
        cloud = normalize(sample_shape(category, _rng(ts, STREAM_TEST_SHAPE, i)))
        if anomalous[i]:
            s = generate_pseudo_anomaly(cloud, category.patches, category.beta_range, _rng(ts, STREAM_TEST_ANOMALY, i))
            test.append(s.cloud)
            labels.append(LabeledInstance(1, s.point_labels))
            draws.append(s.draw)
        else:
            test.append(cloud)
            labels.append(LabeledInstance(0, np.zeros(len(cloud), dtype=bool)))
            draws.append(None)
    return Benchmark(category, train, test, labels, draws)
