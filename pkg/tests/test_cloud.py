import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svdiscover.cloud import (
    LabeledCloud,
    PCDError,
    knn,
    load_labels,
    load_pcd,
    radius_neighbors,
    save_pcd,
    voxelize,
)

HEADER = """VERSION 0.7
FIELDS {fields}
SIZE {sizes}
TYPE {types}
COUNT {counts}
WIDTH {n}
HEIGHT 1
VIEWPOINT 0 0 0 1 0 0 0
POINTS {n}
DATA ascii
"""


def write_pcd(path, fields, rows, declared=None):
    n = len(rows) if declared is None else declared
    k = len(fields)
    text = HEADER.format(
        fields=" ".join(fields), sizes=" ".join(["4"] * k), types=" ".join(["F"] * k),
        counts=" ".join(["1"] * k), n=n,
    )
    text += "\n".join(" ".join(str(v) for v in r) for r in rows) + "\n"
    path.write_text(text)
    return path


def brute_knn(xyz, q, k):
    d = np.sqrt(((xyz - q) ** 2).sum(axis=1))
    order = sorted(range(len(xyz)), key=lambda i: (d[i], i))[:k]
    return [(i, d[i]) for i in order]


class TestLoadPCD:
    def test_minimal_xyz(self, tmp_path):
        p = write_pcd(tmp_path / "a.pcd", "xyz", [(0, 0, 0), (1, 2, 3), (0.5, 0.25, -1)])
        cloud = load_pcd(p)
        assert len(cloud) == 3
        assert cloud.labels is None
        np.testing.assert_array_equal(cloud.xyz[1], [1, 2, 3])

    def test_label_field(self, tmp_path):
        p = write_pcd(tmp_path / "b.pcd", ["x", "y", "z", "label"], [(0, 0, 0, 0), (1, 0, 0, 1), (2, 0, 0, 1)])
        cloud = load_pcd(p)
        assert cloud.labels.tolist() == [0, 1, 1]
        assert cloud.object_ids.tolist() == [1]

    def test_count_mismatch(self, tmp_path):
        p = write_pcd(tmp_path / "c.pcd", "xyz", [(i, 0, 0) for i in range(4)], declared=5)
        with pytest.raises(PCDError, match="POINTS 5"):
            load_pcd(p)

    def test_non_finite_names_line(self, tmp_path):
        p = write_pcd(tmp_path / "d.pcd", "xyz", [(0, 0, 0), ("nan", 0, 0)])
        with pytest.raises(PCDError, match="line 12"):
            load_pcd(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "e.pcd"
        p.write_text("FIELDS x y z\nBOGUS 1\nPOINTS 0\nDATA ascii\n")
        with pytest.raises(PCDError, match="line 2"):
            load_pcd(p)

    def test_missing_axis(self, tmp_path):
        p = write_pcd(tmp_path / "f.pcd", "xy", [(0, 0)])
        with pytest.raises(PCDError, match="'z'"):
            load_pcd(p)

    def test_wrong_column_count(self, tmp_path):
        p = tmp_path / "g.pcd"
        p.write_text("FIELDS x y z\nPOINTS 1\nDATA ascii\n1 2\n")
        with pytest.raises(PCDError, match="line 4"):
            load_pcd(p)

    def test_sidecar_labels(self, tmp_path):
        p = write_pcd(tmp_path / "h.pcd", "xyz", [(0, 0, 0), (1, 0, 0)])
        lab = tmp_path / "h.labels"
        lab.write_text("0\n4\n")
        cloud = load_pcd(p, labels_path=lab)
        assert cloud.labels.tolist() == [0, 4]
        lab.write_text("0\n")
        with pytest.raises(PCDError):
            load_labels(lab, 2)

    def test_pcl_float_packed_rgb(self, tmp_path):
        import struct

        packed = (10 << 16) | (200 << 8) | 30
        as_float = struct.unpack("<f", struct.pack("<I", packed))[0]
        p = tmp_path / "i.pcd"
        p.write_text(f"FIELDS x y z rgb\nTYPE F F F F\nPOINTS 1\nDATA ascii\n0 0 0 {as_float!r}\n")
        assert load_pcd(p).rgb.tolist() == [[10, 200, 30]]


class TestRoundTrip:
    @settings(max_examples=30, deadline=None)
    @given(
        xyz=arrays(np.float64, st.tuples(st.integers(0, 40), st.just(3)),
                   elements=st.floats(-1e6, 1e6, allow_nan=False)),
        with_rgb=st.booleans(),
        with_labels=st.booleans(),
    )
    def test_save_load_identity(self, tmp_path_factory, xyz, with_rgb, with_labels):
        rng = np.random.default_rng(len(xyz))
        rgb = rng.integers(0, 256, size=xyz.shape) if with_rgb else None
        labels = rng.integers(0, 5, size=len(xyz)) if with_labels else None
        cloud = LabeledCloud(xyz, rgb, labels)
        path = tmp_path_factory.mktemp("rt") / "c.pcd"
        save_pcd(cloud, path)
        back = load_pcd(path)
        assert back == cloud
        assert back.xyz.tobytes() == cloud.xyz.tobytes()


class TestVoxelize:
    def test_same_cell(self):
        grid = voxelize(LabeledCloud([[0, 0, 0], [0.005, 0, 0]]), 0.01)
        assert grid.cells == {(0, 0, 0): [0, 1]}

    def test_next_cell(self):
        assert list(voxelize(LabeledCloud([[0.015, 0, 0]]), 0.01).cells) == [(1, 0, 0)]

    def test_empty(self):
        assert len(voxelize(LabeledCloud(np.zeros((0, 3))), 0.1)) == 0

    def test_bad_resolution(self):
        with pytest.raises(ValueError):
            voxelize(LabeledCloud([[0, 0, 0]]), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(
        xyz=arrays(np.float64, st.tuples(st.integers(0, 200), st.just(3)),
                   elements=st.floats(-5, 5, allow_nan=False)),
        res=st.floats(0.01, 2.0),
    )
    def test_partition(self, xyz, res):
        grid = voxelize(LabeledCloud(xyz), res)
        seen = sorted(i for members in grid.cells.values() for i in members)
        assert seen == list(range(len(xyz)))
        for key, members in grid.cells.items():
            for i in members:
                assert tuple(np.floor(xyz[i] / res).astype(int)) == key


class TestNeighbors:
    def test_identity_query(self):
        cloud = LabeledCloud(np.random.default_rng(0).random((20, 3)))
        assert knn(cloud, cloud.xyz[7], 1) == [(7, 0.0)]

    def test_k_clamped(self):
        cloud = LabeledCloud(np.random.default_rng(1).random((6, 3)))
        res = knn(cloud, [0, 0, 0], 50)
        assert len(res) == 6
        assert [d for _, d in res] == sorted(d for _, d in res)

    def test_empty_cloud(self):
        with pytest.raises(ValueError):
            knn(LabeledCloud(np.zeros((0, 3))), [0, 0, 0], 1)

    def test_ties_by_index(self):
        cloud = LabeledCloud([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 5]])
        assert [i for i, _ in knn(cloud, [0, 0, 0], 2)] == [0, 1]

    @pytest.mark.parametrize("seed", range(10))
    def test_knn_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        xyz = rng.random((100, 3))
        cloud = LabeledCloud(xyz)
        for q in rng.random((10, 3)):
            got = knn(cloud, q, 5)
            want = brute_knn(xyz, q, 5)
            assert [i for i, _ in got] == [i for i, _ in want]
            np.testing.assert_allclose([d for _, d in got], [d for _, d in want], rtol=0, atol=0)

    def test_knn_grid_ties_match_brute_force(self):
        g = np.arange(5, dtype=float)
        xyz = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        cloud = LabeledCloud(xyz)
        for q in ([2, 2, 2], [0, 0, 0], [2.5, 2, 1]):
            assert knn(cloud, q, 9) == [(i, float(d)) for i, d in brute_knn(xyz, np.array(q, float), 9)]

    def test_radius_closed_ball(self):
        cloud = LabeledCloud([[0.5, 0, 0], [0.5000001, 0, 0]])
        assert radius_neighbors(cloud, [0, 0, 0], 0.5) == [0]

    def test_radius_far_query(self):
        cloud = LabeledCloud(np.random.default_rng(2).random((50, 3)))
        assert radius_neighbors(cloud, [100, 100, 100], 1.0) == []

    def test_radius_bad(self):
        with pytest.raises(ValueError):
            radius_neighbors(LabeledCloud([[0, 0, 0]]), [0, 0, 0], -1)

    @pytest.mark.parametrize("seed", range(10))
    def test_radius_matches_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 501))
        xyz = rng.random((n, 3))
        cloud = LabeledCloud(xyz)
        for q in rng.random((5, 3)):
            r = float(rng.uniform(0.05, 0.4))
            d = np.sqrt(((xyz - q) ** 2).sum(axis=1))
            assert radius_neighbors(cloud, q, r) == [i for i in range(n) if d[i] <= r]
            k = int(rng.integers(1, 20))
            assert knn(cloud, q, k) == [(i, float(di)) for i, di in brute_knn(xyz, q, k)]
