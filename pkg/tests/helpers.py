import itertools
from collections import deque

import numpy as np

from svdiscover.supervoxel import Segmentation, Supervoxel, SupervoxelAdjacency


def fake_segmentation(xyz, point_labels, edges=(), seed_resolution=0.1):
    """Segmentation built directly from a per-point supervoxel id array."""
    xyz = np.asarray(xyz, dtype=np.float64)
    point_labels = np.asarray(point_labels, dtype=np.int64)
    n_sv = int(point_labels.max()) + 1 if point_labels.size else 0
    svs = []
    for i in range(n_sv):
        idx = np.nonzero(point_labels == i)[0]
        svs.append(Supervoxel(i, seed_resolution, idx, xyz[idx].mean(axis=0), np.array([0, 0, 1.0])))
    e = np.array(sorted((min(a, b), max(a, b)) for a, b in edges), dtype=np.int64).reshape(-1, 2)
    return Segmentation(seed_resolution, seed_resolution / 8, svs, SupervoxelAdjacency(e), point_labels, None, None)


def cube_surface(center, side, spacing, rng):
    g = np.arange(0, side + 1e-9, spacing)
    pts = []
    for axis in range(3):
        for value in (0.0, side):
            u, v = np.meshgrid(g, g, indexing="ij")
            p = np.zeros((u.size, 3))
            p[:, axis] = value
            others = [a for a in range(3) if a != axis]
            p[:, others[0]] = u.ravel()
            p[:, others[1]] = v.ravel()
            pts.append(p)
    pts = np.unique(np.concatenate(pts), axis=0)
    return pts + np.asarray(center) - side / 2 + rng.normal(0, 1e-4, pts.shape)


# --- independent oracles ---------------------------------------------------


def bfs_connected(keys: set) -> bool:
    start = next(iter(keys))
    seen = {start}
    queue = deque([start])
    while queue:
        k = queue.popleft()
        for d in itertools.product((-1, 0, 1), repeat=3):
            nb = (k[0] + d[0], k[1] + d[1], k[2] + d[2])
            if nb in keys and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == len(keys)


def brute_adjacency(keys: np.ndarray, owner: np.ndarray) -> set:
    edges = set()
    for i in range(len(keys)):
        cheb = np.abs(keys - keys[i]).max(axis=1)
        for j in np.nonzero(cheb == 1)[0]:
            if owner[i] != owner[j]:
                edges.add((min(owner[i], owner[j]), max(owner[i], owner[j])))
    return edges


def check_contracts(cloud, seg, brute_force_adjacency=True):
    # partition
    counts = np.zeros(len(cloud), dtype=int)
    for sv in seg.supervoxels:
        assert len(sv) > 0
        counts[sv.point_indices] += 1
        assert np.all(seg.point_labels[sv.point_indices] == sv.id)
    assert np.all(counts == 1)
    # connectivity of each supervoxel's occupied voxels
    keys = seg.voxels.keys
    for sv in seg.supervoxels:
        cells = {tuple(k) for k in keys[np.unique(seg.voxels.point_cell[sv.point_indices])]}
        assert bfs_connected(cells), f"supervoxel {sv.id} is not 26-connected"
    # adjacency: symmetric storage as a < b, irreflexive, certified by voxel pairs
    edges = seg.adjacency.as_set()
    assert all(a < b for a, b in edges)
    if brute_force_adjacency and len(keys) <= 10_000:
        assert edges == brute_adjacency(keys, seg.voxel_labels)
