"""Multi-scale VCCS over-segmentation into supervoxels with an adjacency graph.

Segmentation works on the voxelized cloud: voxels are seeded on a coarse
grid, isolated seeds are dropped, and voxels are grown outward from the
seeds over the 26-neighborhood graph, each joining the supervoxel with the
smallest weighted feature distance

    D = sqrt(w_color*Dc^2 + w_spatial*Ds^2 / (3 R^2) + w_normal*Dn^2)

with Ds the Euclidean distance, Dc the RGB distance on [0, 1] channels and
Dn = 1 - |n_a . n_b|. Centers are re-estimated and the growth is repeated
until the assignment stops changing.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .cloud import LabeledCloud, VoxelGrid, voxelize

log = logging.getLogger(__name__)

DEFAULT_SEED_RESOLUTIONS = (0.05, 0.10, 0.15, 0.20)
MIN_VOXEL_RESOLUTION = 0.005
SEED_MIN_VOXELS = 4
MAX_ROUNDS = 30
NORMAL_K = 20

_OFFSETS = np.array([d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)], dtype=np.int64)


class SegmentationError(RuntimeError):
    pass


class Weights(NamedTuple):
    color: float = 0.2
    spatial: float = 0.4
    normal: float = 1.0


@dataclass(frozen=True, eq=False)
class Supervoxel:
    id: int
    seed_resolution: float
    point_indices: np.ndarray
    centroid: np.ndarray
    mean_normal: np.ndarray
    mean_color: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.point_indices.shape[0]


@dataclass(frozen=True, eq=False)
class SupervoxelAdjacency:
    """Unordered supervoxel id pairs (a < b), sorted."""

    edges: np.ndarray

    def __contains__(self, pair) -> bool:
        a, b = sorted(pair)
        return bool(np.any((self.edges[:, 0] == a) & (self.edges[:, 1] == b)))

    def __len__(self) -> int:
        return self.edges.shape[0]

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    def neighbors(self, sv_id: int) -> list[int]:
        e = self.edges
        return sorted(set(e[e[:, 0] == sv_id, 1].tolist()) | set(e[e[:, 1] == sv_id, 0].tolist()))


@dataclass(frozen=True, eq=False)
class Segmentation:
    """Supervoxels of one seed resolution plus the voxel-level bookkeeping."""

    seed_resolution: float
    voxel_resolution: float
    supervoxels: list[Supervoxel]
    adjacency: SupervoxelAdjacency
    point_labels: np.ndarray  # supervoxel id per point
    voxels: VoxelGrid
    voxel_labels: np.ndarray  # supervoxel id per voxel

    def __iter__(self):
        # unpacks as (supervoxels, adjacency)
        return iter((self.supervoxels, self.adjacency))

    def __len__(self) -> int:
        return len(self.supervoxels)


def default_voxel_resolution(seed_resolution: float) -> float:
    return max(seed_resolution / 8.0, MIN_VOXEL_RESOLUTION)


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------


def _orient(normals: np.ndarray, xyz: np.ndarray, viewpoint: np.ndarray) -> np.ndarray:
    to_view = viewpoint - xyz
    dot = np.einsum("ij,ij->i", normals, to_view)
    scale = np.linalg.norm(to_view, axis=1)
    tie = np.abs(dot) <= 1e-9 * np.maximum(scale, 1e-300)
    # viewpoint in the tangent plane: fall back to a fixed hemisphere (+z, then +y, then +x)
    fallback = np.where(
        normals[:, 2] != 0, normals[:, 2], np.where(normals[:, 1] != 0, normals[:, 1], normals[:, 0])
    )
    flip = np.where(tie, fallback < 0, dot < 0)
    return np.where(flip[:, None], -normals, normals)


def normals_from_covariance(cov: np.ndarray, xyz: np.ndarray, viewpoint=(0.0, 0.0, 0.0)):
    """Least-eigenvalue eigenvectors of a stack of 3x3 covariances."""
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    top = evals[:, 2]
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(top, 1e-300)
    degenerate |= top <= 0
    normals[degenerate] = (0.0, 0.0, 1.0)
    ok = ~degenerate
    normals[ok] = _orient(normals[ok], xyz[ok], np.asarray(viewpoint, dtype=np.float64))
    return normals, degenerate


def estimate_normals(cloud, k: int, viewpoint=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals over the ``k`` nearest neighbors of every point.

    Returns ``(normals, degenerate)``. Normals face ``viewpoint``; rank < 2
    neighborhoods get +z and ``degenerate[i] = True``.
    """
    xyz = cloud.xyz if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64)
    n = xyz.shape[0]
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    tree = cloud.tree if isinstance(cloud, LabeledCloud) else cKDTree(xyz)
    _, idx = tree.query(xyz, k=k)
    nb = xyz[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    return normals_from_covariance(cov, xyz, viewpoint)


# ---------------------------------------------------------------------------
# voxel graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _VoxelCloud:
    keys: np.ndarray
    centroid: np.ndarray
    normal: np.ndarray
    color: Optional[np.ndarray]
    indptr: np.ndarray  # CSR adjacency
    indices: np.ndarray

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        src = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return src, self.indices


def voxel_adjacency(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CSR (indptr, indices) of the 26-neighborhood graph over integer voxel keys."""
    n = keys.shape[0]
    if n == 0:
        return np.zeros(1, np.int64), np.zeros(0, np.int64)
    base = keys - keys.min(axis=0) + 1
    dims = base.max(axis=0) + 2
    code = (base[:, 0] * dims[1] + base[:, 1]) * dims[2] + base[:, 2]
    order = np.argsort(code, kind="stable")
    sorted_code = code[order]
    src_parts, dst_parts = [], []
    for off in _OFFSETS:
        c = code + (off[0] * dims[1] + off[1]) * dims[2] + off[2]
        pos = np.searchsorted(sorted_code, c)
        pos = np.minimum(pos, n - 1)
        hit = sorted_code[pos] == c
        src_parts.append(np.nonzero(hit)[0])
        dst_parts.append(order[pos[hit]])
    src = np.concatenate(src_parts)
    dst = np.concatenate(dst_parts)
    o = np.lexsort((dst, src))
    src, dst = src[o], dst[o]
    indptr = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst


def _build_voxel_cloud(cloud: LabeledCloud, grid: VoxelGrid, normal_k: int) -> _VoxelCloud:
    n_vox = len(grid)
    counts = np.bincount(grid.point_cell, minlength=n_vox).astype(np.float64)
    centroid = np.stack(
        [np.bincount(grid.point_cell, weights=cloud.xyz[:, a], minlength=n_vox) for a in range(3)], axis=1
    ) / counts[:, None]
    color = None
    if cloud.rgb is not None:
        rgb = cloud.rgb.astype(np.float64) / 255.0
        color = np.stack(
            [np.bincount(grid.point_cell, weights=rgb[:, a], minlength=n_vox) for a in range(3)], axis=1
        ) / counts[:, None]
    normal = np.tile([0.0, 0.0, 1.0], (n_vox, 1))
    if len(cloud) >= 3:
        point_normals, degenerate = estimate_normals(cloud, min(normal_k, len(cloud)))
        # sign-free average: principal direction of sum n n^T per voxel
        w = (~degenerate).astype(np.float64)
        outer = np.einsum("ni,nj->nij", point_normals, point_normals) * w[:, None, None]
        acc = np.zeros((n_vox, 3, 3))
        np.add.at(acc, grid.point_cell, outer)
        evals, evecs = np.linalg.eigh(acc)
        good = evals[:, 2] > 0
        normal[good] = evecs[good, :, 2]
        normal = _orient(normal, centroid, np.zeros(3))
    indptr, indices = voxel_adjacency(grid.keys)
    return _VoxelCloud(grid.keys, centroid, normal, color, indptr, indices)


# ---------------------------------------------------------------------------
# VCCS
# ---------------------------------------------------------------------------


class _Centers(NamedTuple):
    xyz: np.ndarray
    normal: np.ndarray
    color: Optional[np.ndarray]


def _feature_distance(vc: _VoxelCloud, vox: np.ndarray, centers: _Centers, sv: np.ndarray, w: Weights, seed_res: float):
    ds2 = ((vc.centroid[vox] - centers.xyz[sv]) ** 2).sum(axis=1)
    dn = 1.0 - np.abs((vc.normal[vox] * centers.normal[sv]).sum(axis=1))
    d2 = w.spatial * ds2 / (3.0 * seed_res * seed_res) + w.normal * dn * dn
    if vc.color is not None and w.color > 0:
        d2 = d2 + w.color * ((vc.color[vox] - centers.color[sv]) ** 2).sum(axis=1)
    return np.sqrt(d2)


def _select_seeds(vc: _VoxelCloud, seed_res: float) -> np.ndarray:
    """Voxel indices of surviving seeds, in seeding-cell key order."""
    cell = np.floor(vc.centroid / seed_res).astype(np.int64)
    cell_keys, inv = np.unique(cell, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    center = (cell_keys[inv] + 0.5) * seed_res
    d = np.sqrt(((vc.centroid - center) ** 2).sum(axis=1))
    # nearest voxel per occupied seeding cell, ties by voxel index
    order = np.lexsort((np.arange(vc.n), d, inv))
    first = np.r_[True, inv[order][1:] != inv[order][:-1]]
    candidates = order[first]
    tree = cKDTree(vc.centroid)
    counts = np.array([len(x) for x in tree.query_ball_point(vc.centroid[candidates], seed_res / 2)])
    candidates = candidates[counts >= SEED_MIN_VOXELS]
    # seeds from stacked seeding cells can land on the same surface patch; keep the first
    kept: list[int] = []
    if candidates.size:
        ctree = cKDTree(vc.centroid[candidates])
        alive = np.ones(candidates.size, dtype=bool)
        for i in range(candidates.size):
            if not alive[i]:
                continue
            kept.append(int(candidates[i]))
            for j in ctree.query_ball_point(vc.centroid[candidates[i]], seed_res / 2):
                if j > i and np.linalg.norm(vc.centroid[candidates[j]] - vc.centroid[candidates[i]]) < seed_res / 2:
                    alive[j] = False
    return np.array(kept, dtype=np.int64)


def _adopt_orphans(vc: _VoxelCloud, seeds: np.ndarray) -> np.ndarray:
    """Add one seed per voxel component that has none (nearest voxel to its centroid)."""
    src, dst = vc.edges()
    graph = coo_matrix((np.ones(src.size), (src, dst)), shape=(vc.n, vc.n))
    n_comp, comp = connected_components(graph, directed=False)
    seeded = np.zeros(n_comp, dtype=bool)
    seeded[comp[seeds]] = True
    extra = []
    for c in range(n_comp):
        if seeded[c]:
            continue
        members = np.nonzero(comp == c)[0]
        mid = vc.centroid[members].mean(axis=0)
        d = ((vc.centroid[members] - mid) ** 2).sum(axis=1)
        extra.append(int(members[np.argmin(d)]))
    return np.concatenate([seeds, np.array(extra, dtype=np.int64)])


def _grow(vc: _VoxelCloud, anchors: np.ndarray, centers: _Centers, w: Weights, seed_res: float) -> np.ndarray:
    """Flood-fill ownership from the anchors; a voxel switches owner when offered a smaller D.

    Ties in D go to the lower supervoxel id.
    """
    owner = np.full(vc.n, -1, dtype=np.int64)
    best = np.full(vc.n, np.inf)
    sv = np.arange(anchors.size)
    owner[anchors] = sv
    best[anchors] = _feature_distance(vc, anchors, centers, sv, w, seed_res)
    is_anchor = np.zeros(vc.n, dtype=bool)
    is_anchor[anchors] = True
    frontier = np.sort(anchors)
    deg = np.diff(vc.indptr)
    while frontier.size:
        counts = deg[frontier]
        total = int(counts.sum())
        if total == 0:
            break
        starts = np.repeat(vc.indptr[frontier] - np.cumsum(counts) + counts, counts)
        src = np.repeat(frontier, counts)
        dst = vc.indices[starts + np.arange(total)]
        s = owner[src]
        keep = ~is_anchor[dst] & (owner[dst] != s)
        src, dst, s = src[keep], dst[keep], s[keep]
        if dst.size == 0:
            break
        d = _feature_distance(vc, dst, centers, s, w, seed_res)
        order = np.lexsort((s, d, dst))
        dst, d, s = dst[order], d[order], s[order]
        first = np.r_[True, dst[1:] != dst[:-1]]
        dst, d, s = dst[first], d[first], s[first]
        cur_d, cur_s = best[dst], owner[dst]
        better = (d < cur_d) | ((d == cur_d) & ((cur_s < 0) | (s < cur_s)))
        dst, d, s = dst[better], d[better], s[better]
        owner[dst] = s
        best[dst] = d
        frontier = dst
    return owner


def _repair_connectivity(vc: _VoxelCloud, owner: np.ndarray, anchors: np.ndarray, centers, w, seed_res) -> np.ndarray:
    """Hand fragments cut off from their anchor to an adjacent connected supervoxel."""
    owner = owner.copy()
    src, dst = vc.edges()
    while True:
        same = owner[src] == owner[dst]
        graph = coo_matrix((np.ones(int(same.sum())), (src[same], dst[same])), shape=(vc.n, vc.n))
        _, comp = connected_components(graph, directed=False)
        anchored = np.zeros(comp.max() + 1, dtype=bool)
        anchored[comp[anchors]] = True
        loose = ~anchored[comp]
        if not loose.any():
            return owner
        moved = False
        border = loose[src] & ~loose[dst]
        frag_ids = np.unique(comp[src[border]])
        for f in frag_ids:
            members = np.nonzero(comp == f)[0]
            e = border & (comp[src] == f)
            cand = np.unique(owner[dst[e]])
            cost = [
                _feature_distance(vc, members, centers, np.full(members.size, c), w, seed_res).mean() for c in cand
            ]
            owner[members] = cand[int(np.argmin(cost))]
            moved = True
        if not moved:
            raise SegmentationError("connectivity repair stalled")  # every fragment touches an anchored part


def _update_centers(vc: _VoxelCloud, owner: np.ndarray, n_sv: int, prev: _Centers) -> _Centers:
    counts = np.bincount(owner, minlength=n_sv).astype(np.float64)
    xyz = np.stack([np.bincount(owner, weights=vc.centroid[:, a], minlength=n_sv) for a in range(3)], 1)
    xyz /= counts[:, None]
    # align voxel normals with the previous center before averaging
    sign = np.sign((vc.normal * prev.normal[owner]).sum(axis=1))
    sign[sign == 0] = 1.0
    aligned = vc.normal * sign[:, None]
    normal = np.stack([np.bincount(owner, weights=aligned[:, a], minlength=n_sv) for a in range(3)], 1)
    norm = np.linalg.norm(normal, axis=1)
    normal = np.where(norm[:, None] > 1e-12, normal / np.maximum(norm, 1e-300)[:, None], prev.normal)
    color = None
    if vc.color is not None:
        color = np.stack([np.bincount(owner, weights=vc.color[:, a], minlength=n_sv) for a in range(3)], 1)
        color /= counts[:, None]
    return _Centers(xyz, normal, color)


def _anchors_for(vc: _VoxelCloud, owner: np.ndarray, centers: _Centers, n_sv: int) -> np.ndarray:
    d = ((vc.centroid - centers.xyz[owner]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(vc.n), d, owner))
    first = np.r_[True, owner[order][1:] != owner[order][:-1]]
    anchors = np.empty(n_sv, dtype=np.int64)
    anchors[owner[order][first]] = order[first]
    return anchors


def vccs_segment(
    cloud: LabeledCloud,
    voxel_resolution: Optional[float] = None,
    seed_resolution: float = 0.1,
    weights: Sequence[float] = Weights(),
    normal_k: int = NORMAL_K,
    max_rounds: int = MAX_ROUNDS,
) -> Segmentation:
    """Over-segment ``cloud`` into supervoxels at one seed resolution.

    Every point ends up in exactly one supervoxel and every supervoxel's
    voxels are 26-connected. A voxel component without a surviving seed
    becomes a supervoxel of its own, so small isolated parts are never
    dropped. The color weight is ignored for clouds without rgb.
    """
    if voxel_resolution is None:
        voxel_resolution = default_voxel_resolution(seed_resolution)
    if not 0 < voxel_resolution < seed_resolution:
        raise ValueError(
            f"need 0 < voxel_resolution < seed_resolution, got {voxel_resolution} and {seed_resolution}"
        )
    w = Weights(*weights)
    if min(w) < 0:
        raise ValueError("weights must be non-negative")
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    grid = voxelize(cloud, voxel_resolution)
    empty_adj = SupervoxelAdjacency(np.zeros((0, 2), np.int64))
    if len(grid) == 0:
        return Segmentation(seed_resolution, voxel_resolution, [], empty_adj, np.zeros(0, np.int64), grid, np.zeros(0, np.int64))

    vc = _build_voxel_cloud(cloud, grid, normal_k)
    seeds = _adopt_orphans(vc, _select_seeds(vc, seed_resolution))
    n_sv = seeds.size
    centers = _Centers(
        vc.centroid[seeds].copy(), vc.normal[seeds].copy(), None if vc.color is None else vc.color[seeds].copy()
    )
    anchors = seeds
    owner = None
    for rnd in range(max_rounds):
        new_owner = _grow(vc, anchors, centers, w, seed_resolution)
        new_owner = _repair_connectivity(vc, new_owner, anchors, centers, w, seed_resolution)
        if owner is not None and np.array_equal(new_owner, owner):
            break
        owner = new_owner
        centers = _update_centers(vc, owner, n_sv, centers)
        anchors = _anchors_for(vc, owner, centers, n_sv)
    else:
        log.debug("vccs: round cap %d reached at seed resolution %s", max_rounds, seed_resolution)
    owner = new_owner
    centers = _update_centers(vc, owner, n_sv, centers)
    return _finalize(cloud, grid, vc, owner, centers, seed_resolution, voxel_resolution)


def _finalize(cloud, grid, vc, owner, centers: _Centers, seed_res, voxel_res) -> Segmentation:
    n_sv = centers.xyz.shape[0]
    point_owner = owner[grid.point_cell]
    order = np.argsort(point_owner, kind="stable")
    bounds = np.cumsum(np.bincount(point_owner, minlength=n_sv))[:-1]
    groups = np.split(order, bounds)
    supervoxels = []
    for sid, idx in enumerate(groups):
        idx = np.sort(idx)
        color = None
        if cloud.rgb is not None:
            color = cloud.rgb[idx].astype(np.float64).mean(axis=0)
        supervoxels.append(
            Supervoxel(sid, seed_res, idx, cloud.xyz[idx].mean(axis=0), centers.normal[sid], color)
        )
    src, dst = vc.edges()
    a, b = owner[src], owner[dst]
    cross = a < b
    pairs = np.unique(np.stack([a[cross], b[cross]], axis=1), axis=0) if cross.any() else np.zeros((0, 2), np.int64)
    return Segmentation(seed_res, voxel_res, supervoxels, SupervoxelAdjacency(pairs), point_owner, grid, owner)


def multi_scale_segment(
    cloud: LabeledCloud,
    seed_resolutions: Iterable[float] = DEFAULT_SEED_RESOLUTIONS,
    voxel_resolution: Optional[float] = None,
    weights: Sequence[float] = Weights(),
    normal_k: int = NORMAL_K,
) -> list[Segmentation]:
    """One independent segmentation per seed resolution, in the given order.

    ``voxel_resolution`` None applies the per-scale default rule.
    """
    resolutions = [float(r) for r in seed_resolutions]
    if any(r <= 0 for r in resolutions):
        raise ValueError("seed resolutions must be positive")
    if len(set(resolutions)) != len(resolutions):
        raise ValueError(f"seed resolutions must be distinct, got {resolutions}")
    out = []
    for r in resolutions:
        try:
            out.append(vccs_segment(cloud, voxel_resolution, r, weights, normal_k))
        except (ValueError, SegmentationError) as exc:
            raise SegmentationError(f"seed resolution {r}: {exc}") from exc
    return out


def write_segmentation_dump(scales: Sequence[Segmentation], path) -> None:
    """Lines ``point_index scale_index supervoxel_id``."""
    lines = []
    for s_idx, seg in enumerate(scales):
        for i, sid in enumerate(seg.point_labels):
            lines.append(f"{i} {s_idx} {int(sid)}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_segmentation_dump(path) -> dict[int, np.ndarray]:
    """Scale index -> supervoxel id per point."""
    rows = np.loadtxt(path, dtype=np.int64, ndmin=2)
    out = {}
    for s in np.unique(rows[:, 1]) if rows.size else []:
        sel = rows[rows[:, 1] == s]
        labels = np.empty(sel.shape[0], dtype=np.int64)
        labels[sel[:, 0]] = sel[:, 2]
        out[int(s)] = labels
    return out
