import hashlib

import numpy as np
import pytest

from svdiscover import config, net3d
from svdiscover.cli import EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_OK, dedupe_betas, fold_indices, main
from svdiscover.cloud import LabeledCloud, load_pcd, save_pcd
from svdiscover.config import ConfigError, PipelineConfig
from svdiscover.discover import read_result

TINY = {
    "synth.scenes_per_split": 2,
    "synth.objects_min": 1,
    "synth.objects_max": 1,
    "synth.size_min": 0.15,
    "synth.size_max": 0.2,
    "synth.plane_extent": 0.5,
    "synth.density": 4000.0,
    "segmentation.seed_resolutions": [0.1, 0.2],
    "grid.side": 16,
    "network.fc_units": 16,
    "network.embed_dim": 4,
    "optimizer.epochs": 1,
    "pairs.cap_positive": 10,
    "pairs.cap_cross_object_center": 5,
    "pairs.cap_boundary_adjacent": 5,
    "pairs.cap_background": 10,
}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.toml"
    config.save(PipelineConfig().replace(**TINY), cfg_path)
    assert main(["synth", "--config", str(cfg_path), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", str(root / "data"), "--config", str(cfg_path), "--out", str(root / "model")]) == EXIT_OK
    return root, cfg_path


def test_synth_layout_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    assert len(list((root / "data" / "train").glob("*.pcd"))) == 2
    assert len(list((root / "data" / "test").glob("*.pcd"))) == 2
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    for f in ("manifest.json", "train/scene_000.pcd", "test/scene_001.pcd"):
        assert digest(tmp_path / f) == digest(root / "data" / f)


def test_bad_kind_split(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[synth]\ntrain_kinds = ["box"]\ntest_kinds = ["box"]\n')
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_train_outputs(workspace):
    root, _ = workspace
    assert (root / "model" / "model.ckpt").exists()
    lines = (root / "model" / "train_report_vdml.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,mean_pos_d2,mean_neg_d2" and len(lines) == 2


def test_train_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", str(root / "data"), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert digest(tmp_path / "model.ckpt") == digest(root / "model" / "model.ckpt")


def test_train_dvc_mode(workspace, tmp_path):
    root, cfg = workspace
    dvc = tmp_path / "dvc.toml"
    config.save(config.load(cfg).replace(**{"training.mode": "dvc"}), dvc)
    assert main(["train", str(root / "data"), "--config", str(dvc), "--out", str(tmp_path)]) == EXIT_OK
    params = net3d.load_checkpoint(tmp_path / "model.ckpt")
    assert params.arch.n_classes == 3  # background, box, cylinder
    assert (tmp_path / "train_report_dvc.csv").exists()


def test_train_missing_labels(workspace, tmp_path):
    _, cfg = workspace
    (tmp_path / "train").mkdir()
    save_pcd(LabeledCloud(np.random.default_rng(0).random((50, 3))), tmp_path / "train" / "a.pcd")
    assert main(["train", str(tmp_path), "--config", str(cfg), "--out", str(tmp_path / "m")]) == EXIT_DATA


def test_discover_and_eval(workspace, tmp_path):
    root, cfg = workspace
    scene = root / "data" / "test" / "scene_000.pcd"
    args = ["discover", str(root / "model" / "model.ckpt"), str(scene), "--config", str(cfg), "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    ids = read_result(tmp_path / "objects.txt")
    assert len(ids) == len(load_pcd(scene))
    assert (tmp_path / "summary.json").exists()
    first = digest(tmp_path / "objects.txt")
    assert main(args) == EXIT_OK and digest(tmp_path / "objects.txt") == first
    assert main(["eval", str(tmp_path / "objects.txt"), str(scene), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "metrics.csv").read_text().startswith("accuracy,")


def test_eval_perfect_result(workspace, tmp_path, capsys):
    root, cfg = workspace
    scene = root / "data" / "test" / "scene_001.pcd"
    labels = load_pcd(scene).labels
    (tmp_path / "gt.txt").write_text("".join(f"{i} {v}\n" for i, v in enumerate(labels)))
    assert main(["eval", str(tmp_path / "gt.txt"), str(scene), "--out", str(tmp_path)]) == EXIT_OK
    row = (tmp_path / "metrics.csv").read_text().splitlines()[1].split(",")
    assert row[:8] == ["1.000000", "1.000000", "0.000000", "0.000000", "0.000000", "0.000000", "1.000000", "0.000000"]


def test_eval_missing_labels(tmp_path):
    save_pcd(LabeledCloud(np.zeros((2, 3))), tmp_path / "s.pcd")
    (tmp_path / "r.txt").write_text("0 0\n1 0\n")
    assert main(["eval", str(tmp_path / "r.txt"), str(tmp_path / "s.pcd"), "--out", str(tmp_path)]) == EXIT_DATA


def test_discover_empty_scene(workspace, tmp_path):
    root, cfg = workspace
    save_pcd(LabeledCloud(np.zeros((0, 3))), tmp_path / "empty.pcd")
    assert main(["discover", str(root / "model" / "model.ckpt"), str(tmp_path / "empty.pcd"), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "objects.txt").read_text() == ""


def test_discover_checkpoint_mismatch(workspace, tmp_path):
    root, _ = workspace
    scene = root / "data" / "test" / "scene_000.pcd"
    # default config expects a side-32 network with 64-d embeddings
    assert main(["discover", str(root / "model" / "model.ckpt"), str(scene), "--out", str(tmp_path)]) == EXIT_MODEL


def test_seed_flag_overrides_config(workspace, tmp_path, capsys):
    _, cfg = workspace
    assert main(["config", "--config", str(cfg), "--seed", "17"]) == EXIT_OK
    assert "rng_seed = 17" in capsys.readouterr().out


def test_sweep_beta_small(workspace, tmp_path):
    root, cfg = workspace
    args = ["sweep-beta", str(root / "data"), "--config", str(cfg), "--betas", "1.0,0.6,0.6", "--folds", "2", "--out", str(tmp_path)]
    with pytest.warns(UserWarning, match="duplicate"):
        assert main(args) == EXIT_OK
    rows = (tmp_path / "beta_sweep.csv").read_text().splitlines()
    assert rows[0] == "beta,accuracy,assigned_supervoxels" and len(rows) == 3
    assigned = {float(r.split(",")[0]): int(r.split(",")[2]) for r in rows[1:]}
    assert assigned[1.0] <= assigned[0.6]


def test_beta_helpers():
    assert dedupe_betas([0.5, 0.8]) == [0.5, 0.8]
    with pytest.raises(ConfigError):
        dedupe_betas([0.0])
    folds = fold_indices(10, 5)
    assert sorted(np.concatenate(folds).tolist()) == list(range(10)) and all(len(f) == 2 for f in folds)
    with pytest.raises(ConfigError):
        fold_indices(3, 5)
