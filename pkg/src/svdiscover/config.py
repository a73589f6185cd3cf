"""Pipeline configuration: TOML sections, validation, and round-trip serialization.

Values that come straight from the method (beta, seed resolutions, the
DBSCAN density threshold) are written plain; every other default is a
project choice and carries a ``# gap:`` comment in the serialized file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import tomlkit

from .pairs import CATEGORIES, DEFAULT_CAP
from .synth import KINDS, DEFAULT_TEST_KINDS, DEFAULT_TRAIN_KINDS


class ConfigError(ValueError):
    pass


def _gap(note: str) -> dict:
    return {"gap": note}


@dataclass
class SegmentationConfig:
    seed_resolutions: list = field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20])
    voxel_divisor: float = field(default=8.0, metadata=_gap("voxel resolution = seed resolution / divisor"))
    voxel_min: float = field(default=0.005, metadata=_gap("floor on the voxel resolution, meters"))
    w_color: float = field(default=0.2, metadata=_gap("VCCS color weight (ignored for xyz-only clouds)"))
    w_spatial: float = field(default=0.4, metadata=_gap("VCCS spatial weight"))
    w_normal: float = field(default=1.0, metadata=_gap("VCCS normal weight"))
    normal_k: int = field(default=20, metadata=_gap("neighbors for PCA normals"))

    def validate(self):
        if not self.seed_resolutions or any(not r > 0 for r in self.seed_resolutions):
            raise ConfigError("segmentation.seed_resolutions must be a non-empty list of positive values")
        if len(set(self.seed_resolutions)) != len(self.seed_resolutions):
            raise ConfigError("segmentation.seed_resolutions must be distinct")
        if not self.voxel_divisor > 1:
            raise ConfigError("segmentation.voxel_divisor must exceed 1 so voxels are finer than seeds")
        if not self.voxel_min > 0:
            raise ConfigError("segmentation.voxel_min must be positive")
        if min(self.w_color, self.w_spatial, self.w_normal) < 0:
            raise ConfigError("segmentation weights must be non-negative")
        if self.normal_k < 3:
            raise ConfigError("segmentation.normal_k must be >= 3")

    def voxel_resolution(self, seed_resolution: float) -> float:
        return max(seed_resolution / self.voxel_divisor, self.voxel_min)


@dataclass
class GridConfig:
    side: int = field(default=32, metadata=_gap("occupancy grid cells per edge"))
    padding: int = field(default=2, metadata=_gap("empty border cells"))

    def validate(self):
        if self.side < 8:
            raise ConfigError("grid.side must be >= 8")
        if self.padding < 0 or 2 * self.padding >= self.side:
            raise ConfigError("grid.padding must leave a non-empty interior")


@dataclass
class NetworkConfig:
    embed_dim: int = field(default=64, metadata=_gap("embedding dimensionality"))
    fc_units: int = field(default=128, metadata=_gap("fully connected width"))
    leak: float = field(default=0.1, metadata=_gap("leaky ReLU slope"))

    def validate(self):
        if self.embed_dim < 1 or self.fc_units < 1:
            raise ConfigError("network widths must be positive")
        if not 0 <= self.leak < 1:
            raise ConfigError("network.leak must lie in [0, 1)")


@dataclass
class PairsConfig:
    beta: float = 0.8
    cap_positive: int = field(default=DEFAULT_CAP, metadata=_gap("max positive pairs per scene"))
    cap_cross_object_center: int = field(default=DEFAULT_CAP, metadata=_gap("max central cross-object negatives per scene"))
    cap_boundary_adjacent: int = field(default=DEFAULT_CAP, metadata=_gap("max boundary negatives per scene"))
    cap_background: int = field(default=DEFAULT_CAP, metadata=_gap("max background negatives per scene"))

    def validate(self):
        if not 0 < self.beta <= 1:
            raise ConfigError("pairs.beta must lie in (0, 1]")
        if min(self.caps().values()) < 0:
            raise ConfigError("pair caps must be non-negative")

    def caps(self) -> dict[str, int]:
        return {"positive": self.cap_positive} | {c: getattr(self, f"cap_{c}") for c in CATEGORIES}


@dataclass
class LossSection:
    b: float = field(default=0.0, metadata=_gap("hinge bias"))
    m: float = field(default=1.0, metadata=_gap("hinge margin"))

    def validate(self):
        if not self.m > 0:
            raise ConfigError("loss.m must be positive")


@dataclass
class OptimizerSection:
    learning_rate: float = field(default=0.01, metadata=_gap("SGD step size"))
    momentum: float = field(default=0.9, metadata=_gap("SGD momentum"))
    epochs: int = field(default=30, metadata=_gap("maximum training epochs"))
    batch_size: int = field(default=32, metadata=_gap("pairs per SGD step"))

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("optimizer.learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("optimizer.momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("optimizer.epochs and optimizer.batch_size must be >= 1")


@dataclass
class TrainingConfig:
    mode: str = field(default="vdml", metadata=_gap("vdml (Siamese) or dvc (classification baseline)"))
    pretrain_dvc_epochs: int = field(default=0, metadata=_gap("classification pretraining epochs before vdml; 0 trains from random init"))

    def validate(self):
        if self.mode not in ("vdml", "dvc"):
            raise ConfigError(f"training.mode must be 'vdml' or 'dvc', got {self.mode!r}")
        if self.pretrain_dvc_epochs < 0:
            raise ConfigError("training.pretrain_dvc_epochs must be >= 0")


@dataclass
class DbscanConfig:
    eps: Union[float, str] = field(default="auto", metadata=_gap("'auto' picks the 1-NN distance quantile"))
    quantile: float = field(default=0.9, metadata=_gap("quantile used when eps = 'auto'"))
    min_pts: int = 2

    def validate(self):
        if self.eps != "auto" and not (isinstance(self.eps, (int, float)) and self.eps > 0):
            raise ConfigError("dbscan.eps must be 'auto' or a positive number")
        if not 0 <= self.quantile <= 1:
            raise ConfigError("dbscan.quantile must lie in [0, 1]")
        if self.min_pts < 2:
            raise ConfigError("dbscan.min_pts must be >= 2")

    def fixed_eps(self) -> Optional[float]:
        return None if self.eps == "auto" else float(self.eps)


@dataclass
class SynthConfig:
    train_kinds: list = field(default_factory=lambda: list(DEFAULT_TRAIN_KINDS))
    test_kinds: list = field(default_factory=lambda: list(DEFAULT_TEST_KINDS))
    scenes_per_split: int = field(default=10, metadata=_gap("scenes per split"))
    objects_min: int = field(default=2, metadata=_gap("objects per scene, lower bound"))
    objects_max: int = field(default=3, metadata=_gap("objects per scene, upper bound"))
    size_min: float = field(default=0.15, metadata=_gap("object size range, meters"))
    size_max: float = field(default=0.24, metadata=_gap("object size range, meters"))
    plane_extent: float = field(default=1.0, metadata=_gap("square ground plane edge, meters"))
    density: float = field(default=20000.0, metadata=_gap("surface samples per square meter"))
    noise_sigma: float = field(default=0.003, metadata=_gap("Gaussian coordinate noise, meters"))
    min_separation: float = field(default=0.15, metadata=_gap("closest allowed gap between objects, meters"))

    def validate(self):
        for k in self.train_kinds + self.test_kinds:
            if k not in KINDS:
                raise ConfigError(f"unknown shape kind {k!r}; expected one of {KINDS}")
        if set(self.train_kinds) & set(self.test_kinds):
            raise ConfigError(f"train and test kinds overlap: {sorted(set(self.train_kinds) & set(self.test_kinds))}")
        if not self.train_kinds or not self.test_kinds:
            raise ConfigError("both splits need at least one kind")
        if self.scenes_per_split < 1 or not 0 <= self.objects_min <= self.objects_max:
            raise ConfigError("synth counts are inconsistent")
        if not 0 < self.size_min <= self.size_max:
            raise ConfigError("synth size range is invalid")
        if min(self.plane_extent, self.density) <= 0 or min(self.noise_sigma, self.min_separation) < 0:
            raise ConfigError("synth extents, density and noise must be positive")

    def recipe(self):
        from .synth import SceneRecipe

        return SceneRecipe(
            objects_per_scene=(self.objects_min, self.objects_max),
            size_range=(self.size_min, self.size_max),
            plane_extent=(self.plane_extent, self.plane_extent),
            density=self.density,
            noise_sigma=self.noise_sigma,
            min_separation=self.min_separation,
        )


@dataclass
class MetricsConfig:
    overlap: str = field(default="iou", metadata=_gap("'iou' or 'recall' point overlap for accuracy"))
    tau: float = 0.8

    def validate(self):
        if self.overlap not in ("iou", "recall"):
            raise ConfigError("metrics.overlap must be 'iou' or 'recall'")
        if not 0 <= self.tau <= 1:
            raise ConfigError("metrics.tau must lie in [0, 1]")


@dataclass
class PipelineConfig:
    rng_seed: int = 0
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    pairs: PairsConfig = field(default_factory=PairsConfig)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    SECTIONS = ("segmentation", "grid", "network", "pairs", "loss", "optimizer", "training", "dbscan", "synth", "metrics")

    def validate(self) -> "PipelineConfig":
        if not isinstance(self.rng_seed, int) or self.rng_seed < 0:
            raise ConfigError("rng_seed must be a non-negative integer")
        for name in self.SECTIONS:
            getattr(self, name).validate()
        return self

    def architecture(self):
        from .net3d import Architecture

        return Architecture(side=self.grid.side, fc_units=self.network.fc_units, embed_dim=self.network.embed_dim, leak=self.network.leak)

    def replace(self, **changes) -> "PipelineConfig":
        """Copy with ``section.field`` (or top-level) overrides, validated."""
        out = from_dict(to_dict(self))
        for key, value in changes.items():
            section, _, name = key.rpartition(".")
            target = getattr(out, section) if section else out
            if not hasattr(target, name):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(target, name, value)
        return out.validate()


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------


def to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(section: str, f: dataclasses.Field, value: Any):
    want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    where = f"{section}.{f.name}" if section else f.name
    if isinstance(value, bool):
        raise ConfigError(f"{where}: booleans are not accepted here")
    try:
        if want == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{where}: expected an integer, got {value}")
            return int(value)
        if want == "float":
            return float(value)
        if want == "str":
            return str(value)
        if want == "list":
            return [v.unwrap() if hasattr(v, "unwrap") else v for v in value]
        if want.startswith("Union"):
            return value if isinstance(value, str) else float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return value


def from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    cfg = PipelineConfig()
    unknown = set(data) - set(PipelineConfig.SECTIONS) - {"rng_seed"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    if "rng_seed" in data:
        cfg.rng_seed = _coerce("", next(f for f in fields(PipelineConfig) if f.name == "rng_seed"), data["rng_seed"])
    for name in PipelineConfig.SECTIONS:
        raw = data.get(name, {}) or {}
        section = getattr(cfg, name)
        known = {f.name: f for f in fields(section)}
        bad = set(raw) - set(known)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        for key, value in raw.items():
            setattr(section, key, _coerce(name, known[key], value))
    return cfg


def dumps(cfg: PipelineConfig) -> str:
    """TOML text; non-method defaults are marked with ``# gap:`` comments."""
    doc = tomlkit.document()
    doc.add(tomlkit.comment("svdiscover pipeline configuration"))
    doc.add("rng_seed", cfg.rng_seed)
    for name in PipelineConfig.SECTIONS:
        section = getattr(cfg, name)
        table = tomlkit.table()
        for f in fields(section):
            value = getattr(section, f.name)
            item = tomlkit.item(list(value) if isinstance(value, (list, tuple)) else value)
            if "gap" in f.metadata:
                item.comment(f"gap: {f.metadata['gap']}")
            table.add(f.name, item)
        doc.add(name, table)
    return tomlkit.dumps(doc)


def loads(text: str) -> PipelineConfig:
    try:
        data = tomlkit.parse(text).unwrap()
    except tomlkit.exceptions.ParseError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(data).validate()


def load(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def save(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
