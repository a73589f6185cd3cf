"""Binary occupancy grids rendered from single supervoxels (network input)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cloud import LabeledCloud
from .supervoxel import Supervoxel

DEFAULT_SIDE = 32
DEFAULT_PADDING = 2


def render_points(xyz: np.ndarray, center: np.ndarray, side: int = DEFAULT_SIDE, padding: int = DEFAULT_PADDING) -> np.ndarray:
    """Hit grid of ``xyz`` centered at ``center``, indexed ``[x, y, z]``.

    The longest bounding-box edge spans ``side - 2*padding`` cells, so
    aspect ratio is kept and absolute scale is factored out. Points that
    fall outside (possible when ``center`` is far off the box middle) are
    clamped to the border cells.
    """
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    if padding < 0 or 2 * padding >= side:
        raise ValueError(f"padding {padding} leaves no interior in a side-{side} grid")
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if xyz.shape[0] == 0:
        raise ValueError("cannot render an empty point set")
    grid = np.zeros((side, side, side), dtype=np.float32)
    extent = float((xyz.max(axis=0) - xyz.min(axis=0)).max())
    half = side // 2
    if extent == 0.0:
        grid[half, half, half] = 1.0
        return grid
    cell = extent / (side - 2 * padding)
    idx = np.floor((xyz - np.asarray(center, dtype=np.float64)) / cell).astype(np.int64) + half
    np.clip(idx, 0, side - 1, out=idx)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return grid


def render_occupancy(cloud: LabeledCloud, sv: Supervoxel, side: int = DEFAULT_SIDE, padding: int = DEFAULT_PADDING) -> np.ndarray:
    """Occupancy grid of the supervoxel's own points, centered at its centroid."""
    if len(sv) == 0:
        raise ValueError(f"supervoxel {sv.id} is empty")
    return render_points(cloud.xyz[sv.point_indices], sv.centroid, side, padding)


def write_grid(grid: np.ndarray, path) -> None:
    """Debug dump: ``side`` on the first line, then 0/1 values x-fastest."""
    side = grid.shape[0]
    flat = np.asarray(grid).reshape(side, side, side).flatten(order="F")
    Path(path).write_text(f"{side}\n" + " ".join("1" if v else "0" for v in flat) + "\n")


def read_grid(path) -> np.ndarray:
    head, *rest = Path(path).read_text().split()
    side = int(head)
    values = np.array([int(v) for v in rest], dtype=np.float32)
    if values.size != side ** 3:
        raise ValueError(f"grid dump holds {values.size} values, expected {side ** 3}")
    return values.reshape((side, side, side), order="F")
