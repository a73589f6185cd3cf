"""End-to-end stages shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import net3d
from .cloud import LabeledCloud
from .config import PipelineConfig
from .discover import DiscoveryResult, discover, render_bank
from .metrics import MetricReport, evaluate
from .net3d import NetworkParams
from .pairs import AssignmentConfig, PairSet, SupervoxelPair, assign_all, generate_pairs
from .supervoxel import Segmentation, Weights, vccs_segment
from .training import GridBank, LossConfig, OptimizerConfig, TrainReport, train_dvc, train_vdml

Log = Optional[Callable[[str], None]]


@dataclass
class PreparedScene:
    cloud: LabeledCloud
    scales: list[Segmentation]
    bank: GridBank


def segment(cloud: LabeledCloud, cfg: PipelineConfig) -> list[Segmentation]:
    seg = cfg.segmentation
    weights = Weights(seg.w_color, seg.w_spatial, seg.w_normal)
    return [
        vccs_segment(cloud, seg.voxel_resolution(r), r, weights, seg.normal_k)
        for r in seg.seed_resolutions
    ]


def prepare(cloud: LabeledCloud, cfg: PipelineConfig) -> PreparedScene:
    scales = segment(cloud, cfg)
    return PreparedScene(cloud, scales, render_bank(cloud, scales, cfg.grid.side, cfg.grid.padding))


def _scene_key(scene: int, n_scales: int, key: tuple[int, int]) -> tuple[int, int]:
    # fold the scene index into the scale slot so keys stay (slot, id) pairs
    return (scene * n_scales + key[0], key[1])


def training_set(scenes: Sequence[PreparedScene], cfg: PipelineConfig, seed: int) -> tuple[PairSet, GridBank]:
    """Pairs from every scene with a single grid bank keyed by (scene slot, id)."""
    n_scales = len(cfg.segmentation.seed_resolutions)
    merged = PairSet()
    keys, grids = [], []
    for k, sc in enumerate(scenes):
        ps = generate_pairs(sc.scales, sc.cloud, AssignmentConfig(cfg.pairs.beta), cfg.pairs.caps(), seed * 7919 + k)
        fold = lambda p: SupervoxelPair(_scene_key(k, n_scales, p.a), _scene_key(k, n_scales, p.b), p.y)
        merged.positives += [fold(p) for p in ps.positives]
        merged.negatives += [fold(p) for p in ps.negatives]
        merged.provenance += ps.provenance
        keys += [_scene_key(k, n_scales, key) for key in sc.bank.keys]
        grids.append(sc.bank.grids)
    return merged, GridBank(keys, np.concatenate(grids) if grids else np.zeros((0,) + (cfg.grid.side,) * 3, np.uint8))


def _optimizer(cfg: PipelineConfig) -> OptimizerConfig:
    o = cfg.optimizer
    return OptimizerConfig(o.learning_rate, o.momentum, o.epochs, o.batch_size)


def dvc_training_set(scenes: Sequence[PreparedScene], cfg: PipelineConfig, class_of: Callable[[int, int], int]):
    """Grids of assigned supervoxels with class ids; background is class 0.

    ``class_of(scene index, object id)`` maps an object to its class >= 1.
    """
    grids, classes = [], []
    for k, sc in enumerate(scenes):
        assigned = assign_all(sc.scales, sc.cloud, cfg.pairs.beta)
        for row, (s, i) in enumerate(sc.bank.keys):
            obj = int(assigned[s][i])
            if obj >= 0:
                grids.append(sc.bank.grids[row])
                classes.append(0 if obj == 0 else class_of(k, obj))
    return np.array(grids, dtype=np.float32), np.array(classes, dtype=np.int64)


def train(
    scenes: Sequence[PreparedScene],
    cfg: PipelineConfig,
    seed: int,
    class_of: Optional[Callable[[int, int], int]] = None,
    n_classes: int = 0,
    dump_dir=None,
    log: Log = None,
) -> tuple[NetworkParams, list[tuple[str, TrainReport]]]:
    """Train per ``cfg.training``; returns embedding-ready params and the stage reports.

    DVC training (as the whole method or as VDML pretraining) needs
    ``class_of``/``n_classes`` describing object classes; the returned
    params keep the classification head in DVC mode, since test-time
    features then come from the last fully connected layer.
    """
    arch = cfg.architecture()
    params = net3d.init_params(arch, seed)
    reports = []
    opt = _optimizer(cfg)
    dvc_epochs = opt.epochs if cfg.training.mode == "dvc" else cfg.training.pretrain_dvc_epochs
    if dvc_epochs:
        if class_of is None or n_classes < 2:
            raise ValueError("classification training needs object classes")
        grids, classes = dvc_training_set(scenes, cfg, class_of)
        params = net3d.with_dvc_head(params, n_classes, seed)
        params, rep = train_dvc(params, grids, classes, opt, seed, dvc_epochs, dump_dir, log)
        reports.append(("dvc", rep))
        if cfg.training.mode == "dvc":
            return params, reports
        params = net3d.without_dvc_head(params)
    pairs, bank = training_set(scenes, cfg, seed)
    if log is not None:
        log(f"training pairs: {pairs.counts()}")
    params, rep = train_vdml(params, pairs, bank, LossConfig(cfg.loss.b, cfg.loss.m), opt, seed, None, dump_dir, log)
    reports.append(("vdml", rep))
    return params, reports


def head_for(params: NetworkParams) -> str:
    return "features" if params.arch.n_classes else "embed"


def discover_scene(params: NetworkParams, scene: PreparedScene, cfg: PipelineConfig) -> DiscoveryResult:
    result, _, _, _ = discover(
        params, scene.cloud, scene.scales, cfg.dbscan.fixed_eps(), cfg.dbscan.quantile,
        cfg.dbscan.min_pts, cfg.grid.padding, head_for(params), scene.bank,
    )
    return result


def score(result: DiscoveryResult, cloud: LabeledCloud, cfg: PipelineConfig) -> MetricReport:
    return evaluate(result.point_ids, cloud.labels, cfg.metrics.tau, None, cfg.metrics.overlap)
