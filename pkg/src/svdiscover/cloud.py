"""Point-cloud data model, ASCII labeled-PCD I/O, voxel hashing and neighbor queries."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

PathLike = Union[str, Path]


class PCDError(ValueError):
    """Raised for malformed or inconsistent PCD input."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """Points in meters with optional colors and per-point object labels.

    ``labels`` uses 0 for background/clutter and ids >= 1 for objects.
    """

    xyz: np.ndarray
    rgb: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3))
        if not np.all(np.isfinite(xyz)):
            raise ValueError("coordinates must be finite")
        xyz.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        if self.rgb is not None:
            rgb = np.asarray(self.rgb)
            if rgb.shape != xyz.shape:
                raise ValueError(f"rgb shape {rgb.shape} does not match points {xyz.shape}")
            if rgb.min(initial=0) < 0 or rgb.max(initial=0) > 255:
                raise ValueError("rgb values must lie in [0, 255]")
            rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
            rgb.setflags(write=False)
            object.__setattr__(self, "rgb", rgb)
        if self.labels is not None:
            labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64).reshape(-1))
            if labels.shape[0] != xyz.shape[0]:
                raise ValueError(f"{labels.shape[0]} labels for {xyz.shape[0]} points")
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be >= 0 (0 is background)")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledCloud):
            return NotImplemented
        return (
            np.array_equal(self.xyz, other.xyz)
            and _opt_equal(self.rgb, other.rgb)
            and _opt_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def object_ids(self) -> np.ndarray:
        """Sorted object ids present (background excluded)."""
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        ids = np.unique(self.labels)
        return ids[ids > 0]

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.xyz)

    def with_labels(self, labels) -> "LabeledCloud":
        return LabeledCloud(self.xyz, self.rgb, labels)

    def subset(self, indices) -> "LabeledCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledCloud(
            self.xyz[idx],
            None if self.rgb is None else self.rgb[idx],
            None if self.labels is None else self.labels[idx],
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


# ---------------------------------------------------------------------------
# PCD I/O
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")


def _unpack_rgb(values: np.ndarray, type_char: str) -> np.ndarray:
    if type_char == "F":
        # PCL stores packed 0x00RRGGBB reinterpreted as a float32
        packed = np.array([struct.unpack("<I", struct.pack("<f", v))[0] for v in values], dtype=np.uint32)
    else:
        packed = values.astype(np.uint32)
    return np.stack([(packed >> 16) & 0xFF, (packed >> 8) & 0xFF, packed & 0xFF], axis=1).astype(np.uint8)


def load_pcd(path: PathLike, labels_path: Optional[PathLike] = None) -> LabeledCloud:
    """Read an ASCII PCD file with fields x y z and optional rgb / r g b / label.

    Point order is preserved. ``labels_path`` names an optional sidecar file
    of one integer label per line, overriding any label field.
    """
    lines = Path(path).read_text().splitlines()
    header: dict[str, list[str]] = {}
    data_start = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        key = key.upper()
        if key not in _HEADER_KEYS:
            raise PCDError(f"unexpected header entry {key!r}", lineno)
        header[key] = rest
        if key == "DATA":
            if not rest or rest[0].lower() != "ascii":
                raise PCDError(f"only DATA ascii is supported, got {' '.join(rest)!r}", lineno)
            data_start = lineno
            break
    if data_start is None:
        raise PCDError("missing DATA line")
    for key in ("FIELDS", "POINTS"):
        if key not in header:
            raise PCDError(f"missing {key} header")

    fields = [f.lower() for f in header["FIELDS"]]
    for axis in "xyz":
        if axis not in fields:
            raise PCDError(f"FIELDS lacks {axis!r}")
    counts = header.get("COUNT", ["1"] * len(fields))
    if any(c != "1" for c in counts) or len(counts) != len(fields):
        raise PCDError("only COUNT 1 per field is supported")
    types = header.get("TYPE", ["F"] * len(fields))
    if len(types) != len(fields):
        raise PCDError("TYPE entry count differs from FIELDS")
    try:
        n_points = int(header["POINTS"][0])
    except (IndexError, ValueError):
        raise PCDError("POINTS must be an integer") from None

    rows = []
    row_lines = []
    for lineno in range(data_start + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != len(fields):
            raise PCDError(f"expected {len(fields)} values, found {len(parts)}", lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise PCDError(f"non-numeric value in {line!r}", lineno) from None
        row_lines.append(lineno)
    if len(rows) != n_points:
        raise PCDError(f"header declares POINTS {n_points} but file has {len(rows)} data rows")

    table = np.array(rows, dtype=np.float64).reshape(n_points, len(fields))
    col = {name: i for i, name in enumerate(fields)}
    xyz = table[:, [col["x"], col["y"], col["z"]]]
    bad = ~np.all(np.isfinite(xyz), axis=1)
    if bad.any():
        raise PCDError("non-finite coordinate", row_lines[int(np.argmax(bad))])

    rgb = None
    if "rgb" in col:
        rgb = _unpack_rgb(table[:, col["rgb"]], types[col["rgb"]].upper())
    elif all(c in col for c in "rgb"):
        rgb = table[:, [col["r"], col["g"], col["b"]]].astype(np.uint8)

    labels = None
    if "label" in col:
        labels = table[:, col["label"]].astype(np.int64)
    if labels_path is not None:
        labels = load_labels(labels_path, n_points)
    return LabeledCloud(xyz, rgb, labels)


def load_labels(path: PathLike, n_points: Optional[int] = None) -> np.ndarray:
    """Sidecar label file: line i holds the integer label of point i."""
    values = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            values.append(int(line))
        except ValueError:
            raise PCDError(f"label {line!r} is not an integer", lineno) from None
    labels = np.array(values, dtype=np.int64)
    if n_points is not None and labels.size != n_points:
        raise PCDError(f"{labels.size} labels for {n_points} points")
    return labels


def save_pcd(cloud: LabeledCloud, path: PathLike) -> None:
    """Write ``cloud`` as ASCII PCD; coordinates use shortest round-trip repr."""
    columns = [("x", "8", "F"), ("y", "8", "F"), ("z", "8", "F")]
    if cloud.rgb is not None:
        columns.append(("rgb", "4", "U"))
    if cloud.labels is not None:
        columns.append(("label", "4", "I"))
    fields, sizes, types = (list(c) for c in zip(*columns))
    n = len(cloud)
    out = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(sizes),
        "TYPE " + " ".join(types),
        "COUNT " + " ".join("1" for _ in fields),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    packed = None
    if cloud.rgb is not None:
        c = cloud.rgb.astype(np.uint32)
        packed = (c[:, 0] << 16) | (c[:, 1] << 8) | c[:, 2]
    for i in range(n):
        parts = [repr(float(v)) for v in cloud.xyz[i]]
        if packed is not None:
            parts.append(str(int(packed[i])))
        if cloud.labels is not None:
            parts.append(str(int(cloud.labels[i])))
        out.append(" ".join(parts))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Voxel hashing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Partition of point indices into cubic cells of side ``resolution``.

    ``keys[c]`` is the integer cell coordinate of cell ``c`` (lexicographically
    sorted); ``point_cell[i]`` is the cell holding point ``i``.
    """

    resolution: float
    keys: np.ndarray
    point_cell: np.ndarray
    _members: list = field(repr=False)

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def cells(self) -> dict[tuple[int, int, int], list[int]]:
        return {tuple(int(v) for v in k): list(m) for k, m in zip(self.keys, self._members)}

    def members(self, cell: int) -> np.ndarray:
        return self._members[cell]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.point_cell, minlength=len(self)) if len(self) else np.zeros(0, np.int64)


def voxel_keys(xyz: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(xyz, dtype=np.float64) / resolution).astype(np.int64)


def voxelize(cloud: Union[LabeledCloud, np.ndarray], resolution: float) -> VoxelGrid:
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    xyz = cloud.xyz if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if xyz.shape[0] == 0:
        return VoxelGrid(resolution, np.zeros((0, 3), np.int64), np.zeros(0, np.int64), [])
    keys, inverse = np.unique(voxel_keys(xyz, resolution), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=keys.shape[0]))[:-1]
    members = np.split(order, bounds)
    return VoxelGrid(resolution, keys, inverse, members)


# ---------------------------------------------------------------------------
# Neighbor queries
# ---------------------------------------------------------------------------


def _distances(xyz: np.ndarray, query: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = xyz[idx] - query
    return np.sqrt((diff * diff).sum(axis=1))


def _as_query(query: Sequence[float]) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape != (3,):
        raise ValueError(f"query must be a 3-vector, got shape {q.shape}")
    return q


def knn(cloud: LabeledCloud, query: Sequence[float], k: int) -> list[tuple[int, float]]:
    """The ``min(k, n)`` nearest points as (index, distance), ties by lower index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = len(cloud)
    if n == 0:
        raise ValueError("knn query on an empty cloud")
    q = _as_query(query)
    k = min(k, n)
    d_tree, _ = cloud.tree.query(q, k=k)
    kth = float(np.atleast_1d(d_tree)[-1])
    # gather every point tied with the k-th distance before applying the index tie-break
    cand = np.asarray(cloud.tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
    dist = _distances(cloud.xyz, q, cand)
    order = np.lexsort((cand, dist))[:k]
    return [(int(cand[i]), float(dist[i])) for i in order]


def radius_neighbors(cloud: LabeledCloud, query: Sequence[float], radius: float) -> list[int]:
    """Indices of all points within closed distance ``radius``, ascending."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if len(cloud) == 0:
        return []
    q = _as_query(query)
    cand = np.asarray(cloud.tree.query_ball_point(q, radius * (1 + 1e-9)), dtype=np.int64)
    if cand.size == 0:
        return []
    keep = cand[_distances(cloud.xyz, q, cand) <= radius]
    return sorted(int(i) for i in keep)
