"""Command-line front end: ``svdiscover {synth,train,discover,eval,sweep-beta}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint does
not fit the configured network.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from . import net3d
from .cloud import LabeledCloud, PCDError, load_pcd
from .config import ConfigError, PipelineConfig
from .discover import DiscoveryResult, read_result, write_result
from .metrics import MetricError, evaluate
from .net3d import CheckpointError, CheckpointShapeError
from .pairs import UNASSIGNED, PairError, assign_all
from .pipeline import PreparedScene, discover_scene, prepare, score, train
from .synth import SceneError, make_dataset, read_manifest, write_dataset
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

log = logging.getLogger("svdiscover")


class DataError(RuntimeError):
    pass


DATA_ERRORS = (DataError, PCDError, PairError, SceneError, MetricError, TrainingError, OSError)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else PipelineConfig().validate()
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labeled(cloud: LabeledCloud, where) -> LabeledCloud:
    if not cloud.has_labels:
        raise DataError(f"{where}: scene has no ground-truth labels")
    return cloud


def load_split(data_dir, split: str = "train") -> tuple[list[LabeledCloud], Optional[list]]:
    """Scenes of a dataset directory plus their shape specs when a manifest exists."""
    root = Path(data_dir)
    manifest = root / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())[split]
        specs = read_manifest(manifest)
        clouds = [load_pcd(root / e["file"]) for e in entries]
        return clouds, getattr(specs, split)
    files = sorted((root / split).glob("*.pcd")) or sorted(root.glob("*.pcd"))
    if not files:
        raise DataError(f"{root}: no manifest.json and no .pcd scenes")
    return [load_pcd(f) for f in files], None


def class_table(specs) -> tuple[callable, int]:
    """Object class per (scene, object id) from scene specs; class 0 is background."""
    kinds = sorted({s.kind for spec in specs for s in spec.shapes})
    lookup = {kind: i + 1 for i, kind in enumerate(kinds)}
    return (lambda k, obj: lookup[specs[k].shapes[obj - 1].kind]), len(kinds) + 1


def trunk_compatible(params: net3d.NetworkParams, cfg: PipelineConfig) -> None:
    expected = dataclasses.replace(cfg.architecture(), n_classes=params.arch.n_classes)
    if expected.shapes() != params.arch.shapes():
        diff = sorted(n for n in set(expected.shapes()) | set(params.arch.shapes()) if expected.shapes().get(n) != params.arch.shapes().get(n))
        raise CheckpointShapeError(f"checkpoint does not match the configured network; differing tensors: {', '.join(diff)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, out_dir) -> Path:
    s = cfg.synth
    ds = make_dataset(s.train_kinds, s.test_kinds, s.scenes_per_split, cfg.rng_seed, s.recipe())
    return write_dataset(ds, out_dir, {"rng_seed": cfg.rng_seed})


def cmd_train(cfg: PipelineConfig, train_dir, out_dir) -> Path:
    clouds, specs = load_split(train_dir, "train")
    for i, c in enumerate(clouds):
        _labeled(c, f"train scene {i}")
    class_of, n_classes = (None, 0)
    if cfg.training.mode == "dvc" or cfg.training.pretrain_dvc_epochs:
        if specs is None:
            raise DataError("classification training needs a manifest with object kinds")
        class_of, n_classes = class_table(specs)
    scenes = [prepare(c, cfg) for c in clouds]
    out = Path(out_dir)
    params, reports = train(scenes, cfg, cfg.rng_seed, class_of, n_classes, out, log.info)
    ckpt = out / "model.ckpt"
    net3d.save_checkpoint(params, ckpt)
    for stage, rep in reports:
        rep.write_csv(out / f"train_report_{stage}.csv")
    cfgmod.save(cfg, out / "config.toml")
    return ckpt


def cmd_discover(cfg: PipelineConfig, checkpoint, scene_file, out_dir) -> DiscoveryResult:
    params = net3d.load_checkpoint(checkpoint)
    trunk_compatible(params, cfg)
    cloud = load_pcd(scene_file)
    out = Path(out_dir)
    if len(cloud) == 0:
        result = DiscoveryResult(np.zeros(0, np.int64), np.zeros(0, np.int64))
    else:
        result = discover_scene(params, prepare(cloud, cfg), cfg)
    write_result(result, out / "objects.txt", out / "summary.json")
    return result


def cmd_eval(cfg: PipelineConfig, result_file, gt_scene, out_dir):
    pred = read_result(result_file)
    cloud = _labeled(load_pcd(gt_scene), gt_scene)
    if len(pred) != len(cloud):
        raise DataError(f"result has {len(pred)} points, scene has {len(cloud)}")
    report = evaluate(pred, cloud.labels, cfg.metrics.tau, None, cfg.metrics.overlap)
    (Path(out_dir) / "metrics.csv").write_text(report.to_csv())
    return report


def dedupe_betas(betas: Sequence[float]) -> list[float]:
    out = []
    for b in betas:
        if not 0 < b <= 1:
            raise ConfigError(f"beta must lie in (0, 1], got {b}")
        if b in out:
            warnings.warn(f"duplicate beta {b} dropped")
            continue
        out.append(b)
    return out


def fold_indices(n: int, k: int) -> list[np.ndarray]:
    """Contiguous k-fold split of ``range(n)``; each scene is held out exactly once."""
    if not 2 <= k <= n:
        raise ConfigError(f"{k}-fold validation needs between 2 and {n} folds")
    return np.array_split(np.arange(n), k)


def sweep_beta(scenes: Sequence[PreparedScene], cfg: PipelineConfig, betas: Sequence[float], k_folds: int = 5) -> list[dict]:
    """Mean held-out accuracy and assigned-supervoxel count per beta."""
    rows = []
    folds = fold_indices(len(scenes), k_folds)
    for beta in dedupe_betas(betas):
        c = cfg.replace(**{"pairs.beta": float(beta)})
        assigned = sum(int((a != UNASSIGNED).sum()) for sc in scenes for a in assign_all(sc.scales, sc.cloud, beta))
        accs = []
        for f, held in enumerate(folds):
            train_idx = [i for i in range(len(scenes)) if i not in set(held.tolist())]
            params, _ = train([scenes[i] for i in train_idx], c, c.rng_seed + f)
            for i in held:
                accs.append(score(discover_scene(params, scenes[i], c), scenes[i].cloud, c).accuracy)
        rows.append({"beta": float(beta), "accuracy": float(np.mean(accs)), "assigned_supervoxels": assigned})
        log.info("beta %.3f: accuracy %.4f, assigned %d", beta, rows[-1]["accuracy"], assigned)
    return rows


def write_sweep(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta", "accuracy", "assigned_supervoxels"])
        for r in rows:
            w.writerow([f"{r['beta']:.4f}", f"{r['accuracy']:.6f}", r["assigned_supervoxels"]])


def cmd_sweep_beta(cfg: PipelineConfig, train_dir, betas: Sequence[float], k_folds: int, out_dir) -> Path:
    betas = dedupe_betas(betas)  # fail on bad values before any segmentation work
    clouds, _ = load_split(train_dir, "train")
    scenes = [prepare(_labeled(c, f"train scene {i}"), cfg) for i, c in enumerate(clouds)]
    path = Path(out_dir) / "beta_sweep.csv"
    write_sweep(sweep_beta(scenes, cfg, betas, k_folds), path)
    return path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="overrides rng_seed from the config")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="svdiscover", description="Object discovery in point clouds via supervoxel embeddings.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic train/test dataset")
    t = sub.add_parser("train", parents=[common], help="train the embedding network")
    t.add_argument("train_dir")
    d = sub.add_parser("discover", parents=[common], help="discover objects in one scene")
    d.add_argument("checkpoint")
    d.add_argument("scene")
    e = sub.add_parser("eval", parents=[common], help="score a discovery result against ground truth")
    e.add_argument("result")
    e.add_argument("scene")
    s = sub.add_parser("sweep-beta", parents=[common], help="k-fold validation accuracy per beta")
    s.add_argument("train_dir")
    s.add_argument("--betas", type=_floats, default=[0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    s.add_argument("--folds", type=int, default=5)
    sub.add_parser("config", parents=[common], help="print the effective config")
    return p


def run(args) -> int:
    cfg = _config(args)
    if args.command == "config":
        sys.stdout.write(cfgmod.dumps(cfg))
        return EXIT_OK
    out = _out(args)
    if args.command == "synth":
        print(cmd_synth(cfg, out))
    elif args.command == "train":
        print(cmd_train(cfg, args.train_dir, out))
    elif args.command == "discover":
        res = cmd_discover(cfg, args.checkpoint, args.scene, out)
        print(json.dumps(res.summary()))
    elif args.command == "eval":
        sys.stdout.write(cmd_eval(cfg, args.result, args.scene, out).table())
    elif args.command == "sweep-beta":
        print(cmd_sweep_beta(cfg, args.train_dir, args.betas, args.folds, out))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
