"""On-disk layouts: benchmark directories, manifests, reports.

Benchmark directory::

    train/train_000.ply ...
    test/test_000.ply ...
    test/test_000_mask.csv ...   one 0/1 per line
    labels.csv                   instance,file,label,mask_file
    manifest.yaml
"""

from __future__ import annotations

import csv
import io
import os
import platform
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy
import yaml

from .pointcloud import PointCloudError, load_cloud, parse_ply, serialize_ply
from .synth import Benchmark, LabeledInstance


def write_atomic(path, data: bytes) -> Path:
    """Write via a temp file in the same directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_text(path, text: str) -> Path:
    return write_atomic(path, text.encode("utf-8"))


def versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {
        "offsetad": own,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(out_dir, command: str, config: dict, extra=None) -> Path:
    doc = {"command": command, "seed": config.get("seed"), "config": config, "versions": versions()}
    if extra:
        doc.update(extra)
    return write_text(Path(out_dir) / "manifest.yaml", yaml.safe_dump(doc, sort_keys=True))


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue().encode("utf-8")


def offsets_csv(offsets) -> bytes:
    return csv_bytes(["dx", "dy", "dz"], [tuple(map(float, o)) for o in np.asarray(offsets)])


def mask_csv(mask) -> bytes:
    return ("".join(f"{int(m)}\n" for m in np.asarray(mask, dtype=bool))).encode("utf-8")


def read_mask(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        vals = [int(t) for t in text]
    except ValueError:
        raise PointCloudError(f"malformed mask file {path}") from None
    if any(v not in (0, 1) for v in vals):
        raise PointCloudError(f"mask values must be 0 or 1 in {path}")
    return np.array(vals, dtype=bool)


def save_benchmark(bench: Benchmark, out_dir) -> None:
    out = Path(out_dir)
    for i, c in enumerate(bench.train):
        write_atomic(out / "train" / f"train_{i:03d}.ply", serialize_ply(c))
    rows = []
    for i, (c, lab) in enumerate(zip(bench.test, bench.labels)):
        name = f"test/test_{i:03d}.ply"
        mask_name = f"test/test_{i:03d}_mask.csv"
        write_atomic(out / name, serialize_ply(c))
        write_atomic(out / mask_name, mask_csv(lab.point_labels))
        rows.append((i, name, lab.object_label, mask_name))
    write_atomic(out / "labels.csv", csv_bytes(["instance", "file", "label", "mask_file"], rows))


def _read_ply(path, category):
    return parse_ply(Path(path).read_bytes(), category)[0]


def load_train_dir(path, category: str = "") -> list:
    path = Path(path)
    folder = path / "train" if (path / "train").is_dir() else path
    files = sorted(folder.glob("*.ply")) + sorted(folder.glob("*.obj"))
    if not files:
        raise FileNotFoundError(f"no training clouds in {folder}")
    return [load_cloud(f, category) for f in files]


def load_test_dir(path, category: str = ""):
    """Test clouds and LabeledInstances listed in `labels.csv`."""
    path = Path(path)
    label_file = path / "labels.csv"
    if not label_file.is_file():
        raise FileNotFoundError(f"missing {label_file}")
    clouds, labels = [], []
    with label_file.open(newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                cloud = _read_ply(path / row["file"], category)
                mask = read_mask(path / row["mask_file"]) if row.get("mask_file") else None
                label = int(row["label"])
            except KeyError as exc:
                raise PointCloudError(f"labels.csv missing column {exc}") from None
            except ValueError as exc:
                raise PointCloudError(f"bad row in labels.csv: {exc}") from None
            if mask is not None and len(mask) != len(cloud):
                raise PointCloudError(f"mask length mismatch for {row['file']}")
            clouds.append(cloud)
            labels.append(LabeledInstance(label, mask))
    if not clouds:
        raise PointCloudError("labels.csv lists no instances")
    return clouds, labels
