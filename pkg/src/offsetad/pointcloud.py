"""Point cloud container, file formats, and geometric preprocessing."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

UNIT_TOL = 1e-6


class PointCloudError(ValueError):
    """Invalid point cloud data."""


class ParseError(PointCloudError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateError(PointCloudError):
    """Raised when a geometric quantity is undefined for the input."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points with optional unit normals.

    Arrays are copied on construction and marked read-only.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    category: str = ""

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise PointCloudError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != pts.shape:
                raise PointCloudError(f"normals shape {nrm.shape} != points shape {pts.shape}")
            if not np.all(np.isfinite(nrm)):
                raise PointCloudError("non-finite normals")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > UNIT_TOL):
                raise PointCloudError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def replace(self, **changes) -> "PointCloud":
        kw = dict(points=self.points, normals=self.normals, category=self.category)
        kw.update(changes)
        return PointCloud(**kw)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / n


# ---------------------------------------------------------------------------
# k-nearest neighbours
# ---------------------------------------------------------------------------


class KnnIndex:
    """Exact k-NN over a subset of a cloud's points.

    Results match an exhaustive scan: sorted by Euclidean distance, ties
    broken by lower point index. Indices returned refer to the full cloud.
    """

    def __init__(self, cloud: PointCloud, subset: Optional[Sequence[int]] = None):
        self.cloud = cloud
        if subset is None:
            subset = np.arange(len(cloud))
        self.subset = np.array(sorted(set(int(i) for i in subset)), dtype=np.int64)
        self.subset.setflags(write=False)
        self._pts = cloud.points[self.subset]
        self._tree = cKDTree(self._pts) if len(self.subset) else None

    def __len__(self):
        return len(self.subset)

    def query(self, q, k: int) -> np.ndarray:
        return knn_query(self, q, k)


def _exact_distances(pts: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = pts - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def knn_query(index: KnnIndex, q, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise PointCloudError("k-NN index has an empty subset")
    q = np.asarray(q, dtype=np.float64).reshape(3)
    m = len(index)
    k = min(k, m)
    if k == m:
        cand = np.arange(m)
    else:
        dk, _ = index._tree.query(q, k=k)
        radius = float(np.atleast_1d(dk)[-1])
        # widen the ball so that every point tied with the k-th is a candidate
        cand = np.array(index._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    d = _exact_distances(index._pts[cand], q)
    order = np.lexsort((index.subset[cand], d))[:k]
    return index.subset[cand[order]].copy()


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def normalize_params(cloud: PointCloud) -> tuple[np.ndarray, float]:
    """Centroid and divisor used by `normalize`."""
    center = cloud.points.mean(axis=0)
    scale = float(np.max(np.abs(cloud.points - center)))
    extent = float(np.max(np.abs(cloud.points)))
    if scale <= 1e-12 * max(extent, 1.0):
        raise DegenerateError("all points coincide; scale is undefined")
    return center, scale


def normalize(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and divide by the largest absolute coordinate.

    Uniform scaling keeps the aspect ratio, so normals are untouched.
    """
    center, scale = normalize_params(cloud)
    return cloud.replace(points=(cloud.points - center) / scale)


def rotate(cloud: PointCloud, matrix: np.ndarray) -> PointCloud:
    R = np.asarray(matrix, dtype=np.float64)
    normals = None if cloud.normals is None else cloud.normals @ R.T
    if normals is not None:
        # re-unit to absorb rounding in the matrix product
        normals = _unit_rows(normals)
    return cloud.replace(points=cloud.points @ R.T, normals=normals)


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def random_rotation(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Apply one uniformly distributed rotation to points and normals."""
    return rotate(cloud, random_rotation_matrix(rng))


def add_gaussian_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return cloud
    noise = rng.normal(0.0, sigma, size=cloud.points.shape)
    return cloud.replace(points=cloud.points + noise)


@dataclass(frozen=True)
class NormalEstimate:
    cloud: PointCloud
    degenerate: np.ndarray = field(repr=False)


def local_covariances(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Covariance matrix (3x3) of each neighbourhood; neighbors is (N, k)."""
    nb = points[neighbors]
    nb = nb - nb.mean(axis=1, keepdims=True)
    return (nb.transpose(0, 2, 1) @ nb) / neighbors.shape[1]


def estimate_normals(cloud: PointCloud, k: int = 8) -> NormalEstimate:
    """PCA normals from k nearest neighbours, oriented away from the centroid.

    Neighbourhoods whose covariance has rank < 2 are flagged and receive the
    radial direction from the centroid instead.
    """
    n = len(cloud)
    if k < 3 or k > n:
        raise ValueError(f"need 3 <= k <= N, got k={k}, N={n}")
    pts = cloud.points
    _, nbr = cKDTree(pts).query(pts, k=k)
    cov = local_covariances(pts, nbr)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    centroid = pts.mean(axis=0)
    radial = pts - centroid
    top = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * top
    degenerate |= evals[:, 2] <= 1e-300

    flip = np.einsum("ij,ij->i", normals, radial) < 0
    normals[flip] *= -1

    if np.any(degenerate):
        rad = radial[degenerate]
        rlen = np.linalg.norm(rad, axis=1)
        fallback = np.tile([0.0, 0.0, 1.0], (len(rad), 1))
        ok = rlen > 1e-12
        fallback[ok] = rad[ok] / rlen[ok, None]
        normals[degenerate] = fallback
    normals = _unit_rows(normals)
    return NormalEstimate(cloud.replace(normals=normals), degenerate)


def ensure_normals(cloud: PointCloud, k: int = 8) -> PointCloud:
    if cloud.has_normals:
        return cloud
    return estimate_normals(cloud, k=min(k, len(cloud))).cloud


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def _parse_triplet(parts, lineno):
    if len(parts) < 4:
        raise ParseError(f"expected 3 coordinates after '{parts[0]}'", lineno)
    try:
        xyz = [float(t) for t in parts[1:4]]
    except ValueError as exc:
        raise ParseError(f"malformed number: {exc}", lineno) from None
    if not all(np.isfinite(xyz)):
        raise ParseError("non-finite coordinate", lineno)
    return xyz


def parse_obj(data, category: str = "") -> PointCloud:
    """Read `v`/`vn` records; everything else is ignored.

    Normals are attached only when there is exactly one `vn` per `v`.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    verts, norms = [], []
    for lineno, raw in enumerate(data.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "v":
            verts.append(_parse_triplet(parts, lineno))
        elif parts[0] == "vn":
            norms.append(_parse_triplet(parts, lineno))
    if not verts:
        raise PointCloudError("no vertices found")
    normals = None
    if len(norms) == len(verts):
        nv = np.array(norms, dtype=np.float64)
        lengths = np.linalg.norm(nv, axis=1)
        if np.any(lengths <= 0):
            raise ParseError("zero-length normal")
        normals = nv / lengths[:, None]
    return PointCloud(np.array(verts, dtype=np.float64), normals, category)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_obj(cloud: PointCloud) -> bytes:
    out = io.StringIO()
    for p in cloud.points:
        out.write("v " + " ".join(_fmt(c) for c in p) + "\n")
    if cloud.normals is not None:
        for nrm in cloud.normals:
            out.write("vn " + " ".join(_fmt(c) for c in nrm) + "\n")
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# ASCII PLY
# ---------------------------------------------------------------------------


def serialize_ply(cloud: PointCloud, scores: Optional[np.ndarray] = None) -> bytes:
    """ASCII PLY with x,y,z[,nx,ny,nz][,anomaly_score]."""
    cols = [cloud.points]
    props = ["x", "y", "z"]
    if cloud.normals is not None:
        cols.append(cloud.normals)
        props += ["nx", "ny", "nz"]
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64).reshape(-1, 1)
        if len(scores) != len(cloud):
            raise PointCloudError("score count does not match point count")
        cols.append(scores)
        props.append("anomaly_score")
    table = np.hstack(cols)
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    body = "\n".join(" ".join(_fmt(v) for v in row) for row in table)
    return ("\n".join(header) + "\n" + body + "\n").encode("utf-8")


def parse_ply(data, category: str = "") -> tuple[PointCloud, Optional[np.ndarray]]:
    """Parse ASCII PLY. Returns the cloud and the `anomaly_score` channel if present."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    lines = data.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", i)
        elif key == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(parts[2])
                except (IndexError, ValueError):
                    raise ParseError("bad vertex count", i) from None
        elif key == "property" and in_vertex:
            if parts[1] == "list":
                raise ParseError("list properties on vertices are not supported", i)
            props.append(parts[-1])
        elif key == "end_header":
            body_start = i
            break
    if body_start is None or n_vertex is None:
        raise ParseError("incomplete PLY header")
    if n_vertex < 1:
        raise PointCloudError("no vertices found")
    for req in ("x", "y", "z"):
        if req not in props:
            raise ParseError(f"missing vertex property '{req}'")
    rows = []
    for j in range(n_vertex):
        lineno = body_start + 1 + j
        if lineno - 1 >= len(lines):
            raise ParseError("unexpected end of vertex data", lineno)
        parts = lines[lineno - 1].split()
        if len(parts) < len(props):
            raise ParseError("too few values in vertex row", lineno)
        try:
            rows.append([float(t) for t in parts[: len(props)]])
        except ValueError as exc:
            raise ParseError(f"malformed number: {exc}", lineno) from None
    table = np.array(rows, dtype=np.float64)
    col = {p: table[:, idx] for idx, p in enumerate(props)}
    pts = np.column_stack([col["x"], col["y"], col["z"]])
    normals = None
    if all(p in col for p in ("nx", "ny", "nz")):
        normals = _unit_rows(np.column_stack([col["nx"], col["ny"], col["nz"]]))
    scores = col.get("anomaly_score")
    return PointCloud(pts, normals, category), scores


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def serialize_score_csv(cloud: PointCloud, scores: np.ndarray) -> bytes:
    """One row per point: x,y,z,score with 6 significant digits."""
    lines = ["x,y,z,score"]
    for p, s in zip(cloud.points, np.asarray(scores, dtype=np.float64)):
        lines.append(",".join(f"{v:.6g}" for v in (*p, s)))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_cloud(path, category: str = "") -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return parse_obj(data, category)
    if suffix == ".ply":
        return parse_ply(data, category)[0]
    raise PointCloudError(f"unsupported file type: {path.suffix}")
