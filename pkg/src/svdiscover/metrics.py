"""Discovery evaluation: overlap accuracy, F_os/F_us and the discovery rates.

Predictions are per-point object ids with 0 meaning undiscovered; ground
truth is per-point labels with 0 meaning background. Only gt objects
(labels >= 1) are scored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

OVERLAPS = ("iou", "recall")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Match:
    gt_id: int
    cluster_id: Optional[int]
    overlap: float


def _contingency(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersection counts between gt objects (rows) and clusters (cols)."""
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction covers {pred.size} points, ground truth {gt.size}")
    gt_ids = np.unique(gt[gt > 0])
    cl_ids = np.unique(pred[pred > 0])
    table = np.zeros((len(gt_ids), len(cl_ids)), dtype=np.int64)
    mask = (gt > 0) & (pred > 0)
    if mask.any():
        r = np.searchsorted(gt_ids, gt[mask])
        c = np.searchsorted(cl_ids, pred[mask])
        np.add.at(table, (r, c), 1)
    return table, gt_ids, cl_ids


def _overlap_matrix(pred, gt, convention: str):
    if convention not in OVERLAPS:
        raise MetricError(f"overlap convention must be one of {OVERLAPS}, got {convention!r}")
    table, gt_ids, cl_ids = _contingency(pred, gt)
    gt_sizes = np.array([(np.asarray(gt) == g).sum() for g in gt_ids], dtype=np.float64)
    if convention == "recall":
        return table / gt_sizes[:, None], table, gt_ids, cl_ids
    cl_sizes = np.array([(np.asarray(pred) == c).sum() for c in cl_ids], dtype=np.float64)
    union = gt_sizes[:, None] + cl_sizes[None, :] - table
    return np.where(union > 0, table / np.maximum(union, 1), 0.0), table, gt_ids, cl_ids


def match_objects(pred, gt, convention: str = "iou") -> dict[int, Match]:
    """Greedy one-to-one matching by descending overlap (ties: smaller gt id, then cluster id)."""
    ov, table, gt_ids, cl_ids = _overlap_matrix(pred, gt, convention)
    r, c = np.nonzero(table)
    order = np.lexsort((cl_ids[c], gt_ids[r], -ov[r, c]))
    out = {int(g): Match(int(g), None, 0.0) for g in gt_ids}
    used = set()
    for k in order:
        g, cl = int(gt_ids[r[k]]), int(cl_ids[c[k]])
        if out[g].cluster_id is None and cl not in used:
            out[g] = Match(g, cl, float(ov[r[k], c[k]]))
            used.add(cl)
    return out


def accuracy(pred, gt, eval_ids: Optional[Iterable[int]] = None, tau: float = 0.8, convention: str = "iou"):
    """Fraction of ``eval_ids`` whose matched cluster overlaps by more than ``tau``."""
    gt = np.asarray(gt, dtype=np.int64)
    matches = match_objects(pred, gt, convention)
    ids = sorted(matches) if eval_ids is None else sorted(set(int(i) for i in eval_ids))
    if not ids:
        raise MetricError("no ground-truth objects to evaluate")
    missing = [i for i in ids if i not in matches]
    if missing:
        raise MetricError(f"evaluation ids {missing} do not occur in the ground truth")
    found = sum(1 for i in ids if matches[i].cluster_id is not None and matches[i].overlap > tau)
    return found / len(ids), [matches[i] for i in ids]


def _object_points(gt) -> tuple[np.ndarray, int]:
    gt = np.asarray(gt, dtype=np.int64)
    n_all = int((gt > 0).sum())
    if n_all == 0:
        raise MetricError("ground truth contains no object points")
    return gt, n_all


def fos_fus(pred, gt, convention: str = "iou") -> tuple[float, float]:
    """Over- and under-segmentation rates ``1 - n_true/n_all`` and ``n_false/n_all``."""
    gt, n_all = _object_points(gt)
    pred = np.asarray(pred, dtype=np.int64)
    matches = match_objects(pred, gt, convention)
    matched = np.zeros(int(gt.max()) + 1, dtype=np.int64)
    for g, m in matches.items():
        matched[g] = m.cluster_id if m.cluster_id is not None else 0
    obj = gt > 0
    hit = obj & (pred > 0) & (pred == matched[gt])
    n_true = int(hit.sum())
    n_false = int((obj & (pred > 0) & ~hit).sum())
    return 1.0 - n_true / n_all, n_false / n_all


def cluster_majority(pred, gt) -> dict[int, int]:
    """For each cluster, the gt object holding most of its object points (ties: smaller id)."""
    table, gt_ids, cl_ids = _contingency(pred, gt)
    out = {}
    for col, c in enumerate(cl_ids):
        if table[:, col].any():
            out[int(c)] = int(gt_ids[table[:, col].argmax()])
    return out


def discovery_rates(pred, gt) -> tuple[float, float, float, float]:
    """(r_os, r_us, r_gs, r_ms) as fractions of all gt object points.

    A gt object's best cluster is its largest-overlap cluster among those
    whose majority object it is. Its points in the best cluster count as
    good segmentation, points in other clusters as over-segmentation and
    points in no cluster as mis-segmentation. Independently, points lying in
    a cluster whose majority object is a different gt object count as
    under-segmentation.
    """
    gt, n_all = _object_points(gt)
    pred = np.asarray(pred, dtype=np.int64)
    table, gt_ids, cl_ids = _contingency(pred, gt)
    majority = cluster_majority(pred, gt)
    good = over = miss = under = 0
    for row, g in enumerate(gt_ids):
        own = [col for col, c in enumerate(cl_ids) if majority.get(int(c)) == g]
        best = max(own, key=lambda col: (table[row, col], -col)) if own else None
        covered = int(table[row].sum())
        best_pts = int(table[row, best]) if best is not None else 0
        good += best_pts
        over += covered - best_pts
        miss += int(((gt == g) & (pred == 0)).sum())
        under += sum(int(table[row, col]) for col, c in enumerate(cl_ids) if majority.get(int(c), g) != g)
    return over / n_all, under / n_all, good / n_all, miss / n_all


@dataclass
class MetricReport:
    accuracy: float
    accuracy_recall: float
    f_os: float
    f_us: float
    r_os: float
    r_us: float
    r_gs: float
    r_ms: float
    n_gt_objects: int
    n_pred_objects: int
    matches: list[Match] = field(default_factory=list)

    FIELDS = ("accuracy", "accuracy_recall", "f_os", "f_us", "r_os", "r_us", "r_gs", "r_ms", "n_gt_objects", "n_pred_objects")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in self.row()])
        return buf.getvalue()

    def table(self) -> str:
        """Human-readable block with rates as percentages."""
        lines = [f"{'metric':<16}{'value':>10}"]
        for f in self.FIELDS:
            v = getattr(self, f)
            lines.append(f"{f:<16}{v * 100:>9.2f}%" if isinstance(v, float) else f"{f:<16}{v:>10d}")
        lines.append("")
        lines.append(f"{'gt id':<8}{'cluster':>8}{'overlap':>10}")
        for m in self.matches:
            cl = "-" if m.cluster_id is None else str(m.cluster_id)
            lines.append(f"{m.gt_id:<8}{cl:>8}{m.overlap * 100:>9.2f}%")
        return "\n".join(lines) + "\n"


def evaluate(pred, gt, tau: float = 0.8, eval_ids: Optional[Iterable[int]] = None, convention: str = "iou") -> MetricReport:
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    acc, matches = accuracy(pred, gt, eval_ids, tau, convention)
    other = "recall" if convention == "iou" else "iou"
    acc_other, _ = accuracy(pred, gt, eval_ids, tau, other)
    f_os, f_us = fos_fus(pred, gt, convention)
    r_os, r_us, r_gs, r_ms = discovery_rates(pred, gt)
    return MetricReport(
        accuracy=acc,
        accuracy_recall=acc_other if convention == "iou" else acc,
        f_os=f_os, f_us=f_us, r_os=r_os, r_us=r_us, r_gs=r_gs, r_ms=r_ms,
        n_gt_objects=len(matches) if eval_ids is not None else int(len(np.unique(gt[gt > 0]))),
        n_pred_objects=int(len(np.unique(pred[pred > 0]))),
        matches=matches,
    )
