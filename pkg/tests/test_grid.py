import numpy as np
import pytest

from svdiscover.cloud import LabeledCloud
from svdiscover.grid import read_grid, render_occupancy, render_points, write_grid
from svdiscover.supervoxel import Supervoxel


def make_sv(xyz):
    xyz = np.asarray(xyz, dtype=np.float64)
    return LabeledCloud(xyz), Supervoxel(0, 0.1, np.arange(len(xyz)), xyz.mean(axis=0), np.array([0, 0, 1.0]))


def test_single_point_center_cell():
    cloud, sv = make_sv([[0.3, -0.2, 1.0]])
    g = render_occupancy(cloud, sv)
    assert g.sum() == 1 and g[16, 16, 16] == 1


def test_only_supervoxel_points_rendered():
    rng = np.random.default_rng(0)
    xyz = rng.random((100, 3))
    cloud = LabeledCloud(xyz)
    sv = Supervoxel(0, 0.1, np.arange(10), xyz[:10].mean(axis=0), np.array([0, 0, 1.0]))
    np.testing.assert_array_equal(render_occupancy(cloud, sv), render_points(xyz[:10], sv.centroid))


def test_mirror_image():
    rng = np.random.default_rng(1)
    xyz = rng.normal(size=(300, 3)) * [0.03, 0.02, 0.01]
    cloud, sv = make_sv(xyz)
    c = sv.centroid
    mcloud, msv = make_sv(2 * c - xyz)
    g, m = render_occupancy(cloud, sv), render_occupancy(mcloud, msv)
    np.testing.assert_array_equal(m, g[::-1, ::-1, ::-1])


def test_occupied_count_bounds():
    rng = np.random.default_rng(2)
    cloud, sv = make_sv(rng.random((500, 3)) * 0.05)
    n = render_occupancy(cloud, sv).sum()
    assert 0 < n <= 500


def test_binary_values_and_shape():
    rng = np.random.default_rng(3)
    cloud, sv = make_sv(rng.random((50, 3)))
    g = render_occupancy(cloud, sv, side=16, padding=1)
    assert g.shape == (16, 16, 16)
    assert set(np.unique(g)) <= {0.0, 1.0}


@pytest.mark.parametrize("seed", range(5))
def test_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.random((200, 3)) * 0.1
    shift = rng.uniform(-10, 10, size=3)
    a = render_occupancy(*make_sv(xyz))
    b = render_occupancy(*make_sv(xyz + shift))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("factor", [0.5, 3.0, 17.0])
def test_uniform_scale_invariance(factor):
    rng = np.random.default_rng(7)
    xyz = rng.random((200, 3)) * 0.1
    c = xyz.mean(axis=0)
    a = render_occupancy(*make_sv(xyz))
    b = render_occupancy(*make_sv(c + (xyz - c) * factor))
    np.testing.assert_array_equal(a, b)


def test_deterministic():
    rng = np.random.default_rng(8)
    cloud, sv = make_sv(rng.random((80, 3)))
    np.testing.assert_array_equal(render_occupancy(cloud, sv), render_occupancy(cloud, sv))


def test_validation():
    cloud, sv = make_sv([[0, 0, 0], [1, 1, 1]])
    with pytest.raises(ValueError):
        render_occupancy(cloud, sv, side=4)
    with pytest.raises(ValueError):
        render_occupancy(cloud, sv, side=8, padding=4)


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    cloud, sv = make_sv(rng.random((40, 3)))
    g = render_occupancy(cloud, sv, side=8, padding=0)
    write_grid(g, tmp_path / "g.txt")
    np.testing.assert_array_equal(read_grid(tmp_path / "g.txt"), g)
    first = (tmp_path / "g.txt").read_text().split()
    assert first[0] == "8" and first[1] == str(int(g[0, 0, 0])) and first[2] == str(int(g[1, 0, 0]))
