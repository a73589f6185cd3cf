"""Deterministic synthetic tabletop scenes with labeled primitive objects.

Objects stand on a horizontal plane at z = 0. Surfaces are sampled on a
jittered grid so the point density is uniform, the ground-contact faces
are not sampled, and plane points hidden under an object footprint are
dropped. Plane points carry label 0, the k-th object carries label k.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .cloud import LabeledCloud, save_pcd

KINDS = ("box", "cylinder", "sphere", "l_shape", "t_shape")
DEFAULT_TRAIN_KINDS = ("box", "cylinder")
DEFAULT_TEST_KINDS = ("sphere", "l_shape", "t_shape")

MAX_PLACEMENT_ATTEMPTS = 100
NOISE_CLIP = 4.0  # offsets longer than this many sigmas are redrawn


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    """One primitive object.

    ``size`` is the local bounding box (x, y, z) in meters. Cylinders use
    ``size[0]`` as diameter (``size[1]`` must match), spheres use ``size[0]``
    as diameter (all three must match). ``translation`` places the footprint
    center on the plane, ``yaw`` rotates about +z.
    """

    kind: str
    size: tuple[float, float, float]
    translation: tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0
    density: float = 30000.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.size) != 3 or min(self.size) <= 0:
            raise SceneError(f"sizes must be three positive values, got {self.size}")
        if self.density <= 0:
            raise SceneError("density must be positive")
        if self.kind == "cylinder" and not math.isclose(self.size[0], self.size[1]):
            raise SceneError("cylinder size[0] and size[1] are both the diameter and must match")
        if self.kind == "sphere" and not (math.isclose(self.size[0], self.size[1]) and math.isclose(self.size[0], self.size[2])):
            raise SceneError("sphere sizes must all equal the diameter")

    @property
    def footprint_radius(self) -> float:
        """Radius of the circle enclosing the footprint."""
        if self.kind in ("cylinder", "sphere"):
            return self.size[0] / 2
        return math.hypot(self.size[0], self.size[1]) / 2

    def surface_area(self) -> float:
        """Area of the sampled (non ground-contact) surface."""
        sx, sy, sz = self.size
        if self.kind == "sphere":
            return math.pi * sx * sx
        if self.kind == "cylinder":
            r = sx / 2
            return 2 * math.pi * r * sz + math.pi * r * r
        total = 0.0
        boxes = _component_boxes(self)
        # each box minus its ground face, minus the contact patches between boxes (counted twice)
        for lo, hi in boxes:
            dx, dy, dz = hi - lo
            total += 2 * (dx * dz + dy * dz) + dx * dy * (1 if lo[2] > 0 else 0) + dx * dy
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                total -= 2 * _contact_area(boxes[i], boxes[j])
        return total


@dataclass(frozen=True)
class SceneSpec:
    plane_extent: tuple[float, float] = (0.8, 0.8)
    shapes: tuple[ShapeSpec, ...] = ()
    noise_sigma: float = 0.003
    min_separation: float = 0.15
    rng_seed: int = 0
    plane_density: float = 30000.0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "plane_extent", tuple(float(v) for v in self.plane_extent))
        if min(self.plane_extent) <= 0 or self.plane_density <= 0:
            raise SceneError("plane extent and density must be positive")
        if self.noise_sigma < 0 or self.min_separation < 0:
            raise SceneError("noise_sigma and min_separation must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["shapes"] = tuple(
            ShapeSpec(**{**s, "size": tuple(s["size"]), "translation": tuple(s["translation"])})
            for s in data.get("shapes", ())
        )
        data["plane_extent"] = tuple(data["plane_extent"])
        return cls(**data)

    def separation_violations(self) -> list[tuple[int, int, float]]:
        bad = []
        for i, a in enumerate(self.shapes):
            for j in range(i + 1, len(self.shapes)):
                b = self.shapes[j]
                gap = math.dist(a.translation, b.translation) - a.footprint_radius - b.footprint_radius
                if gap < self.min_separation:
                    bad.append((i, j, gap))
        return bad


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------


def _jittered_rect(w: float, h: float, density: float, rng) -> np.ndarray:
    """Stratified samples on [0,w]x[0,h], about density*w*h of them."""
    n_target = density * w * h
    if n_target <= 0:
        return np.zeros((0, 2))
    aspect = w / h
    nx = max(1, round(math.sqrt(n_target * aspect)))
    ny = max(1, round(n_target / nx))
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    pts = (cells + rng.random(cells.shape)) / np.array([nx, ny])
    return pts * np.array([w, h])


def _box_faces(lo: np.ndarray, hi: np.ndarray, density: float, rng, skip_ground: bool = True) -> np.ndarray:
    out = []
    d = hi - lo
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side, value in ((0, lo[axis]), (1, hi[axis])):
            if skip_ground and axis == 2 and side == 0 and value <= 0:
                continue
            uv = _jittered_rect(d[u], d[v], density, rng)
            p = np.empty((uv.shape[0], 3))
            p[:, axis] = value
            p[:, u] = lo[u] + uv[:, 0]
            p[:, v] = lo[v] + uv[:, 1]
            out.append(p)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _component_boxes(shape: ShapeSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Axis-aligned boxes (local frame, footprint centered at origin) forming the shape."""
    sx, sy, sz = shape.size
    x0, y0 = -sx / 2, -sy / 2
    if shape.kind == "box":
        return [(np.array([x0, y0, 0.0]), np.array([-x0, -y0, sz]))]
    t_x, t_z = sx / 3, sz / 3
    if shape.kind == "l_shape":
        upright = (np.array([x0, y0, 0.0]), np.array([x0 + t_x, -y0, sz]))
        foot = (np.array([x0 + t_x, y0, 0.0]), np.array([-x0, -y0, t_z]))
        return [upright, foot]
    if shape.kind == "t_shape":
        stem = (np.array([-t_x / 2, y0, 0.0]), np.array([t_x / 2, -y0, sz - t_z]))
        bar = (np.array([x0, y0, sz - t_z]), np.array([-x0, -y0, sz]))
        return [stem, bar]
    raise SceneError(f"{shape.kind} is not a box union")


def _contact_area(a, b) -> float:
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    ext = hi - lo
    if np.any(ext < 0):
        return 0.0
    flat = np.isclose(ext, 0)
    if flat.sum() != 1:
        return 0.0
    return float(np.prod(ext[~flat]))


def _inside_closed(p: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    return np.all((p >= lo - tol) & (p <= hi + tol), axis=1)


def _sample_local(shape: ShapeSpec, rng) -> np.ndarray:
    sx, _, sz = shape.size
    if shape.kind == "sphere":
        r = sx / 2
        n = max(1, round(shape.density * 4 * math.pi * r * r))
        # Fibonacci lattice under a random rotation
        k = np.arange(n) + 0.5
        polar = np.arccos(1 - 2 * k / n)
        azim = math.pi * (1 + 5 ** 0.5) * k
        unit = np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=1)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        return unit @ q.T * r + np.array([0.0, 0.0, r])
    if shape.kind == "cylinder":
        r = sx / 2
        side = _jittered_rect(2 * math.pi * r, sz, shape.density, rng)
        theta = side[:, 0] / r
        wall = np.stack([r * np.cos(theta), r * np.sin(theta), side[:, 1]], axis=1)
        cap = _jittered_rect(2 * r, 2 * r, shape.density, rng) - r
        cap = cap[np.hypot(cap[:, 0], cap[:, 1]) <= r]
        top = np.column_stack([cap, np.full(cap.shape[0], sz)])
        return np.concatenate([wall, top])
    boxes = _component_boxes(shape)
    parts = []
    for i, (lo, hi) in enumerate(boxes):
        p = _box_faces(lo, hi, shape.density, rng)
        for j, (olo, ohi) in enumerate(boxes):
            if j != i:
                p = p[~_inside_closed(p, olo, ohi)]
        parts.append(p)
    return np.concatenate(parts)


def _pose(shape: ShapeSpec, local: np.ndarray) -> np.ndarray:
    c, s = math.cos(shape.yaw), math.sin(shape.yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return local @ rot.T + np.array([shape.translation[0], shape.translation[1], 0.0])


def _under_footprint(shape: ShapeSpec, xy: np.ndarray) -> np.ndarray:
    d = xy - np.array(shape.translation)
    c, s = math.cos(shape.yaw), math.sin(shape.yaw)
    local = d @ np.array([[c, -s], [s, c]])  # inverse rotation
    if shape.kind in ("sphere", "cylinder"):
        return np.hypot(local[:, 0], local[:, 1]) <= shape.size[0] / 2
    return (np.abs(local[:, 0]) <= shape.size[0] / 2) & (np.abs(local[:, 1]) <= shape.size[1] / 2)


def sample_shape(shape: ShapeSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Noise-free surface samples of ``shape`` in scene coordinates."""
    rng = np.random.default_rng(0) if rng is None else rng
    return _pose(shape, _sample_local(shape, rng))


def _clipped_noise(rng, sigma: float, n: int) -> np.ndarray:
    """Isotropic Gaussian offsets, redrawn until shorter than NOISE_CLIP * sigma."""
    out = rng.normal(0.0, sigma, size=(n, 3))
    bad = np.linalg.norm(out, axis=1) > NOISE_CLIP * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=(int(bad.sum()), 3))
        bad = np.linalg.norm(out, axis=1) > NOISE_CLIP * sigma
    return out


def make_scene(spec: SceneSpec) -> LabeledCloud:
    if spec.separation_violations():
        i, j, gap = spec.separation_violations()[0]
        raise SceneError(f"objects {i} and {j} are {gap:.3f} m apart, below min_separation {spec.min_separation}")
    rng = np.random.default_rng(spec.rng_seed)
    w, h = spec.plane_extent
    plane_xy = _jittered_rect(w, h, spec.plane_density, rng) - np.array([w / 2, h / 2])
    keep = np.ones(plane_xy.shape[0], dtype=bool)
    for shape in spec.shapes:
        keep &= ~_under_footprint(shape, plane_xy)
    plane_xy = plane_xy[keep]
    parts = [np.column_stack([plane_xy, np.zeros(plane_xy.shape[0])])]
    labels = [np.zeros(plane_xy.shape[0], dtype=np.int64)]
    for k, shape in enumerate(spec.shapes, start=1):
        pts = sample_shape(shape, rng)
        parts.append(pts)
        labels.append(np.full(pts.shape[0], k, dtype=np.int64))
    xyz = np.concatenate(parts)
    if spec.noise_sigma > 0:
        xyz = xyz + _clipped_noise(rng, spec.noise_sigma, xyz.shape[0])
    return LabeledCloud(xyz, labels=np.concatenate(labels))


def distance_to_surface(shape: ShapeSpec, xyz: np.ndarray) -> np.ndarray:
    """Unsigned distance from points to the true (closed) surface of ``shape``."""
    d = np.asarray(xyz, dtype=np.float64) - np.array([shape.translation[0], shape.translation[1], 0.0])
    c, s = math.cos(shape.yaw), math.sin(shape.yaw)
    local = d @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    if shape.kind == "sphere":
        r = shape.size[0] / 2
        return np.abs(np.linalg.norm(local - np.array([0, 0, r]), axis=1) - r)
    if shape.kind == "cylinder":
        r, hgt = shape.size[0] / 2, shape.size[2]
        radial = np.hypot(local[:, 0], local[:, 1]) - r
        axial = np.maximum(-local[:, 2], local[:, 2] - hgt)
        outside = np.hypot(np.maximum(radial, 0), np.maximum(axial, 0))
        inside = np.minimum(np.maximum(radial, axial), 0)
        return np.abs(outside + inside)
    boxes = _component_boxes(shape)
    # unsigned distance to the union boundary = |signed distance of the union|
    sdf = np.min([_box_sdf(local, lo, hi) for lo, hi in boxes], axis=0)
    return np.abs(sdf)


def _box_sdf(p, lo, hi):
    center, half = (lo + hi) / 2, (hi - lo) / 2
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    return outside + inside


# ---------------------------------------------------------------------------
# random scenes and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRecipe:
    """Ranges from which random scenes are drawn."""

    objects_per_scene: tuple[int, int] = (2, 3)
    size_range: tuple[float, float] = (0.15, 0.24)
    plane_extent: tuple[float, float] = (1.0, 1.0)
    density: float = 20000.0
    noise_sigma: float = 0.003
    min_separation: float = 0.15
    margin: float = 0.02


def random_shape(kind: str, recipe: SceneRecipe, rng) -> ShapeSpec:
    lo, hi = recipe.size_range
    size = rng.uniform(lo, hi, size=3)
    if kind == "sphere":
        size[:] = size[0]
    elif kind == "cylinder":
        size[1] = size[0]
    elif kind in ("l_shape", "t_shape"):
        # slab-like depth so the union silhouette stays readable
        size[1] = min(size[1], 0.7 * size[0])
    return ShapeSpec(kind, tuple(float(v) for v in size), density=recipe.density)


def random_scene_spec(kinds: Iterable[str], recipe: SceneRecipe, rng_seed: int) -> SceneSpec:
    """Place randomly sized objects of ``kinds`` by rejection sampling.

    Kinds are drawn without replacement while possible, so a scene with no
    more objects than kinds holds distinct kinds.
    """
    rng = np.random.default_rng(rng_seed)
    kinds = list(kinds)
    n_obj = int(rng.integers(recipe.objects_per_scene[0], recipe.objects_per_scene[1] + 1))
    chosen = []
    while len(chosen) < n_obj:
        chosen.extend(rng.permutation(kinds).tolist())
    chosen = chosen[:n_obj]
    w, h = recipe.plane_extent
    placed: list[ShapeSpec] = []
    for kind in chosen:
        base = random_shape(kind, recipe, rng)
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            r = base.footprint_radius + recipe.margin
            if 2 * r > min(w, h):
                continue
            t = (float(rng.uniform(-w / 2 + r, w / 2 - r)), float(rng.uniform(-h / 2 + r, h / 2 - r)))
            cand = ShapeSpec(kind, base.size, t, float(rng.uniform(0, 2 * math.pi)), base.density)
            if all(
                math.dist(cand.translation, o.translation) - cand.footprint_radius - o.footprint_radius
                >= recipe.min_separation
                for o in placed
            ):
                placed.append(cand)
                break
        else:
            raise SceneError(
                f"could not place a {kind} after {MAX_PLACEMENT_ATTEMPTS} attempts; "
                "enlarge the plane or reduce object count/size/min_separation"
            )
    return SceneSpec(
        plane_extent=recipe.plane_extent,
        shapes=tuple(placed),
        noise_sigma=recipe.noise_sigma,
        min_separation=recipe.min_separation,
        rng_seed=int(rng.integers(2**31)),
        plane_density=recipe.density,
    )


@dataclass
class Dataset:
    train: list[SceneSpec] = field(default_factory=list)
    test: list[SceneSpec] = field(default_factory=list)

    def clouds(self, split: str) -> list[LabeledCloud]:
        return [make_scene(s) for s in getattr(self, split)]


def make_dataset(
    train_kinds: Iterable[str] = DEFAULT_TRAIN_KINDS,
    test_kinds: Iterable[str] = DEFAULT_TEST_KINDS,
    scenes_per_split: int = 10,
    rng_seed: int = 0,
    recipe: Optional[SceneRecipe] = None,
    test_recipe: Optional[SceneRecipe] = None,
) -> Dataset:
    """Train and test scene specs whose object kinds never overlap."""
    train_kinds, test_kinds = tuple(train_kinds), tuple(test_kinds)
    for k in train_kinds + test_kinds:
        if k not in KINDS:
            raise SceneError(f"unknown shape kind {k!r}")
    overlap = set(train_kinds) & set(test_kinds)
    if overlap:
        raise SceneError(f"train and test kinds overlap: {sorted(overlap)}")
    if not train_kinds or not test_kinds:
        raise SceneError("both splits need at least one kind")
    recipe = recipe or SceneRecipe()
    test_recipe = test_recipe or recipe
    seeds = np.random.default_rng(rng_seed).integers(2**31, size=2 * scenes_per_split)
    return Dataset(
        train=[random_scene_spec(train_kinds, recipe, int(s)) for s in seeds[:scenes_per_split]],
        test=[random_scene_spec(test_kinds, test_recipe, int(s)) for s in seeds[scenes_per_split:]],
    )


def write_dataset(dataset: Dataset, out_dir, meta: Optional[dict] = None) -> Path:
    """Write ``train/scene_XXX.pcd``, ``test/scene_XXX.pcd`` and ``manifest.json``."""
    out = Path(out_dir)
    manifest = {"meta": meta or {}, "train": [], "test": []}
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, spec in enumerate(getattr(dataset, split)):
            name = f"{split}/scene_{i:03d}.pcd"
            save_pcd(make_scene(spec), out / name)
            manifest[split].append({"file": name, "spec": spec.to_dict()})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> Dataset:
    data = json.loads(Path(path).read_text())
    return Dataset(
        train=[SceneSpec.from_dict(e["spec"]) for e in data["train"]],
        test=[SceneSpec.from_dict(e["spec"]) for e in data["test"]],
    )
