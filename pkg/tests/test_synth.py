import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svdiscover.cloud import load_pcd
from svdiscover.synth import (
    DEFAULT_TEST_KINDS,
    DEFAULT_TRAIN_KINDS,
    KINDS,
    SceneError,
    SceneRecipe,
    SceneSpec,
    ShapeSpec,
    distance_to_surface,
    make_dataset,
    make_scene,
    random_scene_spec,
    read_manifest,
    sample_shape,
    write_dataset,
)


def test_plane_only():
    cloud = make_scene(SceneSpec(plane_extent=(0.5, 0.5)))
    assert len(cloud) > 0 and not cloud.labels.any()


@pytest.mark.parametrize("size", [(0.1, 0.2, 0.3), (0.3, 0.1, 0.05)])
def test_box_point_count_matches_area(size):
    d = 20000.0
    box = ShapeSpec("box", size, density=d)
    sx, sy, sz = size
    area = 2 * (sx * sz + sy * sz) + sx * sy  # bottom face rests on the plane
    n = len(sample_shape(box, np.random.default_rng(0)))
    assert abs(n - d * area) <= 0.05 * d * area


@pytest.mark.parametrize("kind", ["l_shape", "t_shape"])
def test_union_area_excludes_contact_faces(kind):
    shape = ShapeSpec(kind, (0.3, 0.1, 0.3), density=20000.0)
    n = len(sample_shape(shape, np.random.default_rng(1)))
    assert abs(n - shape.density * shape.surface_area()) <= 0.05 * shape.density * shape.surface_area()


def test_scene_determinism():
    spec = random_scene_spec(DEFAULT_TEST_KINDS, SceneRecipe(), 11)
    assert make_scene(spec) == make_scene(spec)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(KINDS))
def test_label_soundness(seed, kind):
    recipe = SceneRecipe(objects_per_scene=(1, 2), density=8000.0)
    spec = random_scene_spec([kind], recipe, seed)
    cloud = make_scene(spec)
    for k, shape in enumerate(spec.shapes, start=1):
        pts = cloud.xyz[cloud.labels == k]
        assert len(pts) > 0
        assert distance_to_surface(shape, pts).max() <= 4 * spec.noise_sigma + 1e-9
    assert not spec.separation_violations()


def test_unplaceable():
    recipe = SceneRecipe(objects_per_scene=(3, 3), plane_extent=(0.4, 0.4), min_separation=0.3)
    with pytest.raises(SceneError, match="could not place"):
        random_scene_spec(["box"], recipe, 0)


def test_violating_spec_rejected():
    a = ShapeSpec("box", (0.1, 0.1, 0.1), (0.0, 0.0))
    b = ShapeSpec("box", (0.1, 0.1, 0.1), (0.15, 0.0))
    with pytest.raises(SceneError, match="apart"):
        make_scene(SceneSpec(shapes=(a, b)))


def test_shape_validation():
    with pytest.raises(SceneError):
        ShapeSpec("cone", (0.1, 0.1, 0.1))
    with pytest.raises(SceneError):
        ShapeSpec("sphere", (0.1, 0.2, 0.1))


class TestDataset:
    def test_class_novelty_audit(self):
        ds = make_dataset(scenes_per_split=10, rng_seed=0)
        train = {s.kind for spec in ds.train for s in spec.shapes}
        test = {s.kind for spec in ds.test for s in spec.shapes}
        assert train <= set(DEFAULT_TRAIN_KINDS) and test <= set(DEFAULT_TEST_KINDS)
        assert not train & test
        # label scan: every object label of a test scene maps to a test kind
        for spec in ds.test[:3]:
            cloud = make_scene(spec)
            for obj in cloud.object_ids:
                assert spec.shapes[obj - 1].kind in DEFAULT_TEST_KINDS

    def test_overlap_rejected(self):
        with pytest.raises(SceneError, match="overlap"):
            make_dataset(["box"], ["box", "sphere"])

    def test_seed_determinism(self):
        assert make_dataset(rng_seed=5, scenes_per_split=3) == make_dataset(rng_seed=5, scenes_per_split=3)
        assert make_dataset(rng_seed=5, scenes_per_split=3) != make_dataset(rng_seed=6, scenes_per_split=3)

    def test_write_and_regenerate(self, tmp_path):
        ds = make_dataset(scenes_per_split=1, rng_seed=2, recipe=SceneRecipe(objects_per_scene=(1, 1), plane_extent=(0.5, 0.5), density=5000.0))
        path = write_dataset(ds, tmp_path, {"rng_seed": 2})
        assert read_manifest(path) == ds
        manifest = json.loads(path.read_text())
        cloud = load_pcd(tmp_path / manifest["test"][0]["file"])
        assert cloud == make_scene(ds.test[0])
