"""Point cloud containers, file formats, normalization and synthetic shapes.

Formats
-------
OFF
    Read-only. Vertices are returned, faces ignored. Accepts the malformed
    header found in ModelNet40 where ``OFF`` is glued to the counts line.
XYZ
    One point per line, ``x y z [label]``, whitespace separated.
HEAP0001 (``.bin``)
    ``b"HEAP0001"`` magic, ``u32`` N, ``u8`` has_labels, then N*3 ``f32``
    coordinates, then (if has_labels) N ``u16`` labels. Little-endian.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigError, DataError, FormatError

BIN_MAGIC = b"HEAP0001"
SHAPES = ("sphere", "cube", "torus", "tetrahedron")


@dataclass
class PointCloud:
    points: np.ndarray
    per_point_labels: Optional[np.ndarray] = None
    class_label: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DataError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DataError("point coordinates must be finite")
        self.points = pts
        if self.per_point_labels is not None:
            labels = np.asarray(self.per_point_labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise DataError(f"per-point labels must have length {pts.shape[0]}, got shape {labels.shape}")
            if labels.size and labels.min() < 0:
                raise DataError("per-point labels must be nonnegative")
            self.per_point_labels = labels

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class Dataset:
    clouds: list
    class_names: list
    part_names: dict = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        for c in self.clouds:
            if c.class_label is not None and not 0 <= c.class_label < len(self.class_names):
                raise DataError(f"class label {c.class_label} of {c.name!r} outside class table")

    def __len__(self) -> int:
        return len(self.clouds)

    def stack(self):
        """Return ``(points, class_labels, per_point_labels)`` arrays.

        All clouds must share a point count. Missing labels become ``None``.
        """
        if not self.clouds:
            raise DataError(f"{self.split} split is empty")
        sizes = {len(c) for c in self.clouds}
        if len(sizes) != 1:
            raise DataError(f"clouds have differing point counts {sorted(sizes)}; resample first")
        pts = np.stack([c.points for c in self.clouds])
        cls = None
        if all(c.class_label is not None for c in self.clouds):
            cls = np.array([c.class_label for c in self.clouds], dtype=np.int64)
        parts = None
        if all(c.per_point_labels is not None for c in self.clouds):
            parts = np.stack([c.per_point_labels for c in self.clouds])
        return pts, cls, parts


def _check_finite(points: np.ndarray, path) -> None:
    if not np.all(np.isfinite(points)):
        raise FormatError(f"{path}: non-finite coordinate")


# ------------------------------------------------------------------------ OFF
def read_off(path) -> PointCloud:
    with open(path, "r") as fh:
        lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(fh)]
    lines = [(n, ln) for n, ln in lines if ln]
    if not lines:
        raise FormatError(f"{path}: empty file")
    lineno, head = lines[0]
    if not head.startswith("OFF"):
        raise FormatError(f"{path}:{lineno}: missing OFF header")
    rest = head[3:].strip()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise FormatError(f"{path}:{lineno}: missing counts line")
        lineno, rest = lines[1]
        pos = 2
    counts = rest.split()
    try:
        n_vertices = int(counts[0])
        if len(counts) < 2:
            raise ValueError
        int(counts[1])
    except (ValueError, IndexError):
        raise FormatError(f"{path}:{lineno}: malformed counts line {rest!r}") from None
    if n_vertices < 1:
        raise FormatError(f"{path}:{lineno}: vertex count must be positive")
    vertex_lines = lines[pos : pos + n_vertices]
    if len(vertex_lines) < n_vertices:
        last = lines[-1][0]
        raise FormatError(f"{path}:{last}: truncated vertex list ({len(vertex_lines)} of {n_vertices})")
    pts = np.empty((n_vertices, 3))
    for row, (n, ln) in enumerate(vertex_lines):
        fields = ln.split()
        try:
            pts[row] = [float(v) for v in fields[:3]]
            if len(fields) < 3:
                raise ValueError
        except ValueError:
            raise FormatError(f"{path}:{n}: malformed vertex {ln!r}") from None
    _check_finite(pts, path)
    return PointCloud(pts, name=Path(path).stem)


# ------------------------------------------------------------------------ XYZ
def read_xyz(path) -> PointCloud:
    pts, labels = [], []
    with open(path, "r") as fh:
        for n, ln in enumerate(fh, start=1):
            fields = ln.split()
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) not in (3, 4):
                raise FormatError(f"{path}:{n}: expected 3 or 4 fields, got {len(fields)}")
            try:
                pts.append([float(v) for v in fields[:3]])
                if len(fields) == 4:
                    labels.append(int(fields[3]))
            except ValueError:
                raise FormatError(f"{path}:{n}: malformed line {ln.strip()!r}") from None
    if not pts:
        raise FormatError(f"{path}: no points")
    if labels and len(labels) != len(pts):
        raise FormatError(f"{path}: labels present on only some lines")
    arr = np.array(pts)
    _check_finite(arr, path)
    return PointCloud(arr, np.array(labels) if labels else None, name=Path(path).stem)


def write_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        labels = cloud.per_point_labels
        for i, p in enumerate(cloud.points):
            line = " ".join(repr(float(v)) for v in p)
            if labels is not None:
                line += f" {int(labels[i])}"
            fh.write(line + "\n")


# ------------------------------------------------------------------------ BIN
def write_bin(cloud: PointCloud, path) -> None:
    labels = cloud.per_point_labels
    if labels is not None and labels.size and labels.max() > 0xFFFF:
        raise FormatError("labels exceed the u16 range of the binary format")
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<IB", len(cloud), 0 if labels is None else 1))
        fh.write(cloud.points.astype("<f4").tobytes())
        if labels is not None:
            fh.write(labels.astype("<u2").tobytes())


def read_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:8] != BIN_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 13:
        raise FormatError(f"{path}: truncated header")
    n, has_labels = struct.unpack_from("<IB", raw, 8)
    if n == 0:
        raise FormatError(f"{path}: point count is zero")
    if has_labels not in (0, 1):
        raise FormatError(f"{path}: invalid label flag {has_labels}")
    expected = 13 + 12 * n + (2 * n if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(f"{path}: length {len(raw)} does not match declared size {expected}")
    pts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=13).reshape(n, 3)
    _check_finite(pts, path)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=13 + 12 * n).astype(np.int64)
    return PointCloud(pts.astype(np.float64), labels, name=Path(path).stem)


def read_cloud(path) -> PointCloud:
    """Dispatch on file extension (``.off``, ``.xyz``/``.txt``, ``.bin``)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".off":
        return read_off(path)
    if ext in (".xyz", ".txt"):
        return read_xyz(path)
    if ext == ".bin":
        return read_bin(path)
    raise FormatError(f"{path}: unsupported extension {ext!r}")


def write_cloud(cloud: PointCloud, path) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".bin":
        write_bin(cloud, path)
    elif ext in (".xyz", ".txt"):
        write_xyz(cloud, path)
    else:
        raise FormatError(f"{path}: cannot write extension {ext!r}")


# -------------------------------------------------------------- preprocessing
def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0:
        centered = centered / radius
    else:
        centered = np.zeros_like(centered)
    return replace(cloud, points=centered)


def sample_points(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Resample to exactly ``n`` points (without replacement when possible)."""
    if n < 1:
        raise ConfigError(f"sample size must be >= 1, got {n}")
    N = len(cloud)
    idx = rng.choice(N, n, replace=N < n)
    labels = None if cloud.per_point_labels is None else cloud.per_point_labels[idx]
    return replace(cloud, points=cloud.points[idx], per_point_labels=labels)


def augment(points: np.ndarray, rng: np.random.Generator, jitter: float = 0.0, rotate: bool = False) -> np.ndarray:
    """Optional training-time augmentation: gaussian jitter and rotation about z."""
    out = points
    if rotate:
        theta = rng.uniform(0, 2 * np.pi, size=points.shape[:-2] + (1,))
        c, s = np.cos(theta), np.sin(theta)
        x, y, z = out[..., 0], out[..., 1], out[..., 2]
        out = np.stack([c * x - s * y, s * x + c * y, z], axis=-1)
    if jitter > 0:
        out = out + rng.normal(0.0, jitter, size=out.shape)
    return out


# -------------------------------------------------------------- synthetic data
def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True), None


def _cube(n, rng):
    # faces: 0:+x 1:-x 2:+y 3:-y 4:+z 5:-z
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        rows = axis == a
        pts[rows, a] = sign[rows]
        pts[np.ix_(rows, others)] = uv[rows]
    return pts, face


def _torus(n, rng, major=1.0, minor=0.35):
    # rejection sampling on the area element (major + minor*cos(v))
    out = np.empty((0, 2))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, major + minor, size=2 * n) < major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    return pts, None


_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
_TETRA_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


def _tetrahedron(n, rng):
    face = rng.integers(0, 4, size=n)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a, b, c = (_TETRA[_TETRA_FACES[face, j]] for j in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, face


_GENERATORS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "tetrahedron": _tetrahedron}


def make_synthetic(
    shape: str,
    n: int,
    noise: float = 0.0,
    seed: int = 0,
    class_label: Optional[int] = None,
    with_parts: bool = False,
) -> PointCloud:
    """Sample ``n`` points uniformly over the surface of a primitive shape.

    Cube (faces, labels 0..5) and tetrahedron (faces, labels 0..3) carry part
    labels when ``with_parts`` is set. Sphere and torus have a single part.
    """
    if shape not in _GENERATORS:
        raise ConfigError(f"unknown shape {shape!r}; expected one of {', '.join(SHAPES)}")
    if n < 8:
        raise ConfigError(f"synthetic clouds need n >= 8, got {n}")
    rng = np.random.default_rng(seed)
    pts, parts = _GENERATORS[shape](n, rng)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    labels = None
    if with_parts:
        labels = parts if parts is not None else np.zeros(n, dtype=np.int64)
    return PointCloud(pts, labels, class_label, name=f"{shape}_{seed}")


def make_synthetic_dataset(
    shapes: Sequence[str] = ("sphere", "cube", "torus"),
    n_clouds: int = 300,
    n_points: int = 256,
    noise: float = 0.01,
    seed: int = 0,
    split: str = "train",
    with_parts: bool = False,
    scale_jitter: float = 0.25,
) -> Dataset:
    """Balanced dataset of normalized synthetic shapes.

    Each cloud gets an independent seed, a random per-axis stretch in
    ``[1 - scale_jitter, 1 + scale_jitter]`` and gaussian noise, and is then
    normalized to the unit sphere.
    """
    if n_clouds < 1:
        raise DataError("dataset needs at least one cloud")
    ss = np.random.SeedSequence([seed, 0 if split == "train" else 1])
    child_seeds = ss.generate_state(n_clouds)
    stretch_rng = np.random.default_rng(ss.spawn(1)[0])
    clouds = []
    for i in range(n_clouds):
        label = i % len(shapes)
        cloud = make_synthetic(shapes[label], n_points, noise, int(child_seeds[i]), label, with_parts)
        stretch = stretch_rng.uniform(1 - scale_jitter, 1 + scale_jitter, size=3)
        cloud = normalize_unit_sphere(replace(cloud, points=cloud.points * stretch))
        clouds.append(cloud)
    part_names = {}
    for s in shapes:
        count = {"cube": 6, "tetrahedron": 4}.get(s, 1)
        part_names[s] = [f"{s}_face{j}" for j in range(count)] if count > 1 else [s]
    return Dataset(clouds, list(shapes), part_names, split)


def load_dataset_dir(root, split: str = "train", n_points: Optional[int] = None, seed: int = 0) -> Dataset:
    """Load ``root/<split>/<class>/<file>`` (OFF, XYZ or BIN) into a dataset.

    Clouds are normalized to the unit sphere and, if ``n_points`` is given,
    resampled to that size.
    """
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"{base} is not a directory")
    class_names = sorted(p.name for p in base.iterdir() if p.is_dir())
    rng = np.random.default_rng(seed)
    clouds = []
    for label, cname in enumerate(class_names):
        for f in sorted((base / cname).iterdir()):
            if f.suffix.lower() not in (".off", ".xyz", ".txt", ".bin"):
                continue
            cloud = normalize_unit_sphere(read_cloud(f))
            if n_points is not None:
                cloud = sample_points(cloud, n_points, rng)
            clouds.append(replace(cloud, class_label=label, name=f"{cname}/{f.stem}"))
    if not clouds:
        raise DataError(f"{base}: no point cloud files found")
    return Dataset(clouds, class_names, {}, split)


def cube_edge_distance(points: np.ndarray) -> np.ndarray:
    """Distance from each point on the [-1, 1] cube surface to the nearest edge."""
    gap = 1.0 - np.abs(points)
    # on a face one coordinate has gap 0; the edge distance is the smaller other gap
    return np.sort(gap, axis=1)[:, 1]


__all__ = [
    "PointCloud",
    "Dataset",
    "read_off",
    "read_xyz",
    "write_xyz",
    "read_bin",
    "write_bin",
    "read_cloud",
    "write_cloud",
    "normalize_unit_sphere",
    "sample_points",
    "augment",
    "make_synthetic",
    "make_synthetic_dataset",
    "load_dataset_dir",
    "cube_edge_distance",
    "SHAPES",
]
