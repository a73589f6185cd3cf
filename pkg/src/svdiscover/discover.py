"""Embedding extraction, DBSCAN in embedding space, and the cross-scale merge."""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import net3d
from .cloud import LabeledCloud
from .grid import DEFAULT_PADDING, render_occupancy
from .net3d import NetworkParams
from .supervoxel import Segmentation
from .training import GridBank

NOISE = -1


class DegenerateScaleWarning(UserWarning):
    pass


@dataclass
class EmbeddingTable:
    """One row per supervoxel per scale: ``keys[i] = (scale index, supervoxel id)``."""

    keys: np.ndarray  # (n, 2) int64
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 2)
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.keys):
            raise ValueError("embedding table needs one vector per key")

    def __len__(self) -> int:
        return len(self.keys)


@dataclass
class DiscoveryResult:
    point_ids: np.ndarray  # 0 = undiscovered
    provenance: np.ndarray  # winning DBSCAN cluster per point, NOISE if none

    @property
    def n_objects(self) -> int:
        return int(self.point_ids.max()) if self.point_ids.size else 0

    def sizes(self) -> list[int]:
        return np.bincount(self.point_ids, minlength=self.n_objects + 1)[1:].tolist()

    def summary(self) -> dict:
        return {
            "n_points": int(self.point_ids.size),
            "n_objects": self.n_objects,
            "object_sizes": self.sizes(),
            "undiscovered_points": int((self.point_ids == 0).sum()),
        }


def render_bank(cloud: LabeledCloud, scales: Sequence[Segmentation], side: int = 32, padding: int = DEFAULT_PADDING) -> GridBank:
    """Occupancy grid of every supervoxel at every scale, in (scale, id) order."""
    keys = [(s, sv.id) for s, seg in enumerate(scales) for sv in seg.supervoxels]
    grids = np.zeros((len(keys), side, side, side), dtype=np.uint8)  # binary; cast per batch
    for row, (s, i) in enumerate(keys):
        grids[row] = render_occupancy(cloud, scales[s].supervoxels[i], side, padding)
    return GridBank(keys, grids)


def embed_all(
    params: NetworkParams,
    cloud: LabeledCloud,
    scales: Sequence[Segmentation],
    padding: int = DEFAULT_PADDING,
    head: str = "embed",
    bank: Optional[GridBank] = None,
) -> EmbeddingTable:
    bank = render_bank(cloud, scales, params.arch.side, padding) if bank is None else bank
    vectors = net3d.embed_batch(params, bank.grids, head=head)
    return EmbeddingTable(np.array(bank.keys, dtype=np.int64).reshape(-1, 2), vectors.astype(np.float64))


def _rows(table) -> np.ndarray:
    x = table.vectors if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float64)
    return x.reshape(len(x), -1) if len(x) else np.zeros((0, 1))


def dbscan(table, eps: float, min_pts: int = 2) -> np.ndarray:
    """Density clustering of table rows; returns a cluster id per row or NOISE.

    A row is core when at least ``min_pts`` rows (itself included) lie
    within ``eps``. Clusters are numbered in order of their lowest core row,
    and a border row joins the first cluster whose expansion reaches it.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if min_pts < 2:
        raise ValueError(f"min_pts must be >= 2, got {min_pts}")
    x = _rows(table)
    n = len(x)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = cKDTree(x).query_ball_point(x, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for start in range(n):
        if labels[start] != NOISE or not core[start]:
            continue
        labels[start] = cluster
        queue = deque([start])
        while queue:
            row = queue.popleft()
            for nb in sorted(neighbors[row]):
                if labels[nb] == NOISE:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return labels


def choose_eps(table, quantile: float = 0.9) -> float:
    """The ``quantile`` of every row's distance to its nearest other row."""
    if not 0 <= quantile <= 1:
        raise ValueError(f"quantile must lie in [0, 1], got {quantile}")
    x = _rows(table)
    if len(x) < 2:
        raise ValueError("choosing eps needs at least 2 rows")
    dist, _ = cKDTree(x).query(x, k=2)
    eps = float(np.quantile(dist[:, 1], quantile))
    if eps == 0.0:
        warnings.warn("nearest-neighbor distances are all zero at this quantile; pass eps explicitly", DegenerateScaleWarning)
    return eps


def clusters_to_objects(labeling: np.ndarray, keys, scales: Sequence[Segmentation], n_points: Optional[int] = None) -> DiscoveryResult:
    """Per-point majority vote over the clusters of its covering supervoxels.

    Noise never votes. Ties go to the tied cluster seen at the finest seed
    resolution. Object ids are renumbered 1.. by descending point count,
    ties by ascending cluster id.
    """
    labeling = np.asarray(labeling, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 2)
    if len(labeling) != len(keys):
        raise ValueError("labeling must cover every table row")
    if n_points is None:
        n_points = len(scales[0].point_labels) if scales else 0
    n_scales = len(scales)
    votes = np.full((n_points, n_scales), NOISE, dtype=np.int64)
    finest_first = sorted(range(n_scales), key=lambda s: (scales[s].seed_resolution, s))
    for col, s in enumerate(finest_first):
        seg = scales[s]
        per_sv = np.full(len(seg), NOISE, dtype=np.int64)
        rows = keys[:, 0] == s
        per_sv[keys[rows, 1]] = labeling[rows]
        votes[:, col] = per_sv[seg.point_labels] if len(seg) else NOISE
    counts = np.zeros_like(votes)
    for col in range(n_scales):
        counts[:, col] = ((votes == votes[:, [col]]) & (votes[:, [col]] != NOISE)).sum(axis=1)
    if n_scales:
        winner_col = counts.argmax(axis=1)  # first maximum = finest scale among the tied
        winner = votes[np.arange(n_points), winner_col]
    else:
        winner = np.full(n_points, NOISE, dtype=np.int64)
    point_ids = np.zeros(n_points, dtype=np.int64)
    clusters = np.unique(winner[winner != NOISE])
    if clusters.size:
        sizes = np.array([(winner == c).sum() for c in clusters])
        order = np.lexsort((clusters, -sizes))
        remap = {int(clusters[k]): rank + 1 for rank, k in enumerate(order)}
        for c, new in remap.items():
            point_ids[winner == c] = new
    return DiscoveryResult(point_ids, winner)


def discover(
    params: NetworkParams,
    cloud: LabeledCloud,
    scales: Sequence[Segmentation],
    eps: Optional[float] = None,
    quantile: float = 0.9,
    min_pts: int = 2,
    padding: int = DEFAULT_PADDING,
    head: str = "embed",
    bank: Optional[GridBank] = None,
) -> tuple[DiscoveryResult, EmbeddingTable, np.ndarray, float]:
    """Full test-time pass: embed, cluster, merge. Returns (result, table, labeling, eps)."""
    table = embed_all(params, cloud, scales, padding, head, bank)
    if len(table) == 0:
        return DiscoveryResult(np.zeros(len(cloud), np.int64), np.full(len(cloud), NOISE, np.int64)), table, np.zeros(0, np.int64), 0.0
    if eps is None:
        eps = choose_eps(table, quantile) if len(table) >= 2 else 1.0
        if eps == 0.0:
            eps = np.finfo(np.float64).tiny
    labeling = dbscan(table, eps, min_pts)
    return clusters_to_objects(labeling, table.keys, scales, len(cloud)), table, labeling, eps


def write_result(result: DiscoveryResult, path, summary_path=None) -> None:
    """``point_index object_id`` per line, plus an optional JSON summary."""
    Path(path).write_text("".join(f"{i} {v}\n" for i, v in enumerate(result.point_ids.tolist())))
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(result.summary(), indent=2) + "\n")


def read_result(path) -> np.ndarray:
    text = Path(path).read_text().split()
    if len(text) % 2:
        raise ValueError(f"{path}: expected 'point_index object_id' pairs")
    pairs = np.array([int(v) for v in text], dtype=np.int64).reshape(-1, 2)
    if not np.array_equal(pairs[:, 0], np.arange(len(pairs))):
        raise ValueError(f"{path}: point indices must run 0..n-1 in order")
    return pairs[:, 1]
