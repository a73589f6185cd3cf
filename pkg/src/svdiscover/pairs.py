"""Supervoxel-to-object assignment and training pair construction.

A supervoxel is assigned to the ground-truth label covering the largest
fraction of its points, provided that fraction reaches ``beta``. Label 0
(background) is a valid assignment target but never forms positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .cloud import LabeledCloud
from .supervoxel import Segmentation, Supervoxel

UNASSIGNED = -1
BACKGROUND = 0
CATEGORIES = ("cross_object_center", "boundary_adjacent", "background")
DEFAULT_CAP = 50_000


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentConfig:
    beta: float = 0.8

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")


class SupervoxelPair(NamedTuple):
    a: tuple[int, int]  # (scale index, supervoxel id)
    b: tuple[int, int]
    y: int


@dataclass
class PairSet:
    positives: list[SupervoxelPair] = field(default_factory=list)
    negatives: list[SupervoxelPair] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)

    def all_pairs(self) -> list[SupervoxelPair]:
        return self.positives + self.negatives

    def counts(self) -> dict[str, int]:
        out = {"positive": len(self.positives)}
        for cat in CATEGORIES:
            out[cat] = self.provenance.count(cat)
        return out

    def members(self) -> list[tuple[int, int]]:
        """Every supervoxel referenced by some pair, sorted."""
        refs = {p.a for p in self.all_pairs()} | {p.b for p in self.all_pairs()}
        return sorted(refs)


def _require_labels(cloud: LabeledCloud) -> np.ndarray:
    if cloud.labels is None:
        raise PairError("assignment needs a labeled cloud")
    return cloud.labels


def assign_to_object(sv: Supervoxel, cloud: LabeledCloud, beta: float = 0.8) -> Optional[int]:
    """Ground-truth id covering at least ``beta`` of ``sv``'s points, else None."""
    AssignmentConfig(beta)
    labels = _require_labels(cloud)[sv.point_indices]
    if labels.size == 0:
        return None
    counts = np.bincount(labels)
    best = int(counts.argmax())  # first maximum = smaller id on ties
    return best if counts[best] / labels.size >= beta else None


def assign_segmentation(seg: Segmentation, cloud: LabeledCloud, beta: float = 0.8) -> np.ndarray:
    """Vectorized :func:`assign_to_object` for every supervoxel of one scale."""
    AssignmentConfig(beta)
    labels = _require_labels(cloud)
    n_sv = len(seg)
    if n_sv == 0:
        return np.zeros(0, dtype=np.int64)
    n_lab = int(labels.max()) + 1
    table = np.bincount(seg.point_labels * n_lab + labels, minlength=n_sv * n_lab).reshape(n_sv, n_lab)
    best = table.argmax(axis=1)
    frac = table[np.arange(n_sv), best] / table.sum(axis=1)
    return np.where(frac >= beta, best, UNASSIGNED).astype(np.int64)


def assign_all(scales: Sequence[Segmentation], cloud: LabeledCloud, beta: float = 0.8) -> list[np.ndarray]:
    return [assign_segmentation(seg, cloud, beta) for seg in scales]


def _central_mask(seg: Segmentation, assigned: np.ndarray, cloud: LabeledCloud) -> np.ndarray:
    """Object supervoxels whose centroid is no farther from the object center than the median."""
    central = np.zeros(len(seg), dtype=bool)
    centroids = np.array([sv.centroid for sv in seg.supervoxels]) if len(seg) else np.zeros((0, 3))
    for obj in np.unique(assigned[assigned > BACKGROUND]):
        members = np.nonzero(assigned == obj)[0]
        center = cloud.xyz[cloud.labels == obj].mean(axis=0)
        dist = np.sqrt(((centroids[members] - center) ** 2).sum(axis=1))
        central[members[dist <= np.median(dist)]] = True
    return central


def _subsample(items: list, cap: Optional[int], rng: np.random.Generator) -> list:
    if cap is None or len(items) <= cap:
        return items
    keep = np.sort(rng.choice(len(items), size=cap, replace=False))
    return [items[i] for i in keep]


def generate_pairs(
    scales: Sequence[Segmentation],
    cloud: LabeledCloud,
    cfg: AssignmentConfig = AssignmentConfig(),
    caps: Optional[dict[str, int]] = None,
    rng_seed: int = 0,
) -> PairSet:
    """Positive and negative supervoxel pairs for one labeled scene.

    ``caps`` maps ``"positive"`` and each negative category to a maximum
    count (default 50 000 each); larger sets are subsampled with a seeded
    generator. A negative pair appears only under the first category that
    produces it.
    """
    caps = {key: DEFAULT_CAP for key in ("positive",) + CATEGORIES} | dict(caps or {})
    assigned = assign_all(scales, cloud, cfg.beta)

    positives = []
    coverage = {}
    for s, a in enumerate(assigned):
        for obj in np.unique(a[a > BACKGROUND]):
            members = np.nonzero(a == obj)[0]
            coverage[int(obj)] = coverage.get(int(obj), 0) + len(members)
            i, j = np.triu_indices(len(members), k=1)
            positives += [SupervoxelPair((s, int(members[p])), (s, int(members[q])), 1) for p, q in zip(i, j)]
    if not positives:
        present = [int(o) for o in np.unique(cloud.labels) if o > BACKGROUND]
        report = ", ".join(f"object {o}: {coverage.get(o, 0)} assigned supervoxels" for o in present) or "no objects"
        raise PairError(f"no positive pair derivable at beta={cfg.beta} ({report})")

    seen: set = set()
    by_cat: dict[str, list[SupervoxelPair]] = {cat: [] for cat in CATEGORIES[:2]}

    def add(cat, a, b):
        key = (a, b) if a < b else (b, a)
        if key not in seen:
            seen.add(key)
            by_cat[cat].append(SupervoxelPair(key[0], key[1], -1))

    for s, (seg, a) in enumerate(zip(scales, assigned)):
        central = np.nonzero(_central_mask(seg, a, cloud))[0]
        for p in range(len(central)):
            for q in range(p + 1, len(central)):
                i, j = int(central[p]), int(central[q])
                if a[i] != a[j]:
                    add("cross_object_center", (s, i), (s, j))
    for s, (seg, a) in enumerate(zip(scales, assigned)):
        for i, j in seg.adjacency.edges:
            ai, aj = a[i], a[j]
            if (ai != aj) and not (ai == UNASSIGNED and aj == UNASSIGNED):
                add("boundary_adjacent", (s, int(i)), (s, int(j)))
    rng = np.random.default_rng(rng_seed)
    out = PairSet(positives=_subsample(positives, caps["positive"], rng))
    for cat in CATEGORIES[:2]:
        chosen = _subsample(by_cat[cat], caps[cat], rng)
        out.negatives += chosen
        out.provenance += [cat] * len(chosen)
    # two background supervoxels share an assignment, so no earlier category holds
    # their pair; sample index pairs directly instead of materializing all of them
    background = [(s, int(i)) for s, a in enumerate(assigned) for i in np.nonzero(a == BACKGROUND)[0]]
    i, j = np.triu_indices(len(background), k=1)
    cap = caps["background"]
    if cap is not None and len(i) > cap:
        keep = np.sort(rng.choice(len(i), size=cap, replace=False))
        i, j = i[keep], j[keep]
    out.negatives += [SupervoxelPair(background[p], background[q], -1) for p, q in zip(i, j)]
    out.provenance += ["background"] * len(i)
    return out


def write_pairs(pairs: PairSet, path) -> None:
    """Text dump: ``scale_a id_a scale_b id_b y provenance`` per line."""
    lines = [f"{p.a[0]} {p.a[1]} {p.b[0]} {p.b[1]} 1 positive" for p in pairs.positives]
    lines += [f"{p.a[0]} {p.a[1]} {p.b[0]} {p.b[1]} -1 {cat}" for p, cat in zip(pairs.negatives, pairs.provenance)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_pairs(path) -> PairSet:
    out = PairSet()
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if len(parts) != 6:
            raise PairError(f"{path}:{n}: expected 6 fields, got {len(parts)}")
        sa, ia, sb, ib, y = (int(v) for v in parts[:5])
        pair = SupervoxelPair((sa, ia), (sb, ib), y)
        if y == 1:
            out.positives.append(pair)
        else:
            out.negatives.append(pair)
            out.provenance.append(parts[5])
    return out
