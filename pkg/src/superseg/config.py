"""Run configuration: defaults, JSON loading, and validation.

Every under-specified constant in the pipeline lives here so runs are fully
reproducible from (config, seed). Unknown keys in a config file are
rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class CategorySpec:
    name: str
    shape: str  # box | sphere | cylinder
    size_min: float
    size_max: float
    color: tuple = (0.5, 0.5, 0.5)

    def validate(self):
        if self.shape not in ("box", "sphere", "cylinder"):
            raise ConfigError(f"unknown shape template {self.shape!r}")
        if not (0 < self.size_min <= self.size_max):
            raise ConfigError(f"bad size range for category {self.name!r}")


def _default_categories():
    return [
        CategorySpec("crate", "box", 0.26, 0.42, (0.82, 0.16, 0.14)),
        CategorySpec("ball", "sphere", 0.13, 0.21, (0.15, 0.72, 0.22)),
        CategorySpec("drum", "cylinder", 0.22, 0.40, (0.18, 0.30, 0.86)),
        CategorySpec("slab", "box", 0.30, 0.52, (0.86, 0.80, 0.18)),
    ]


@dataclass
class SceneConfig:
    categories: list = field(default_factory=_default_categories)
    floor_extent: float = 2.4  # square floor side, meters
    floor_points: int = 1700
    points_per_object: int = 230
    instances_min: int = 2
    instances_max: int = 4
    min_separation: float = 0.55
    color_jitter: float = 0.06  # per-instance color offset, uniform
    color_noise: float = 0.02  # per-point color noise, gaussian
    coord_noise: float = 0.003  # surface jitter, gaussian, meters
    floor_color: tuple = (0.52, 0.50, 0.48)
    teacher_dim: int = 32
    teacher_noise: float = 0.05

    def validate(self):
        if len(self.categories) < 2:
            raise ConfigError("scene config needs at least 2 object categories")
        for c in self.categories:
            c.validate()
        if self.instances_min < 1 or self.instances_max < self.instances_min:
            raise ConfigError("bad instance count range")
        if self.floor_points < 1 or self.points_per_object < 8:
            raise ConfigError("too few points configured")
        if self.teacher_dim < 2:
            raise ConfigError("teacher_dim must be >= 2")

    @property
    def num_categories(self):
        return len(self.categories)


@dataclass
class SuperpointConfig:
    knn: int = 8
    spatial_weight: float = 1.0
    color_weight: float = 0.5
    merge_threshold: float = 0.35
    target_max: int = 512

    def validate(self):
        if self.knn < 1:
            raise ConfigError("knn must be >= 1")
        if self.merge_threshold < 0:
            raise ConfigError("merge_threshold must be >= 0")
        if self.target_max < 1:
            raise ConfigError("target_max must be >= 1")


@dataclass
class EncoderConfig:
    voxel_size: float = 0.02
    channels: tuple = (32, 64)
    out_channels: int = 64

    def validate(self):
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ConfigError("encoder channels must be positive")
        if self.out_channels < 1:
            raise ConfigError("out_channels must be positive")

    @property
    def levels(self):
        return len(self.channels)


@dataclass
class OstConfig:
    num_blocks: int = 3
    align_dim: int = 32
    top_k: int = 100
    ffn_mult: int = 2
    layer_norm_eps: float = 1e-6

    def validate(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.align_dim < 1 or self.top_k < 1 or self.ffn_mult < 1:
            raise ConfigError("bad transformer dimensions")


@dataclass
class PipelineConfig:
    lm_dim: int = 64
    proj_hidden: int = 96
    # which hidden state seeds the mask decoder: the token before [SEG]
    # ("before", default) or the [SEG] position itself ("at")
    seg_hidden_source: str = "before"

    def validate(self):
        if self.seg_hidden_source not in ("before", "at"):
            raise ConfigError("seg_hidden_source must be 'before' or 'at'")
        if self.lm_dim < 1 or self.proj_hidden < 1:
            raise ConfigError("bad pipeline dimensions")


@dataclass
class CameraConfig:
    n_views: int = 3
    image_size: int = 48
    focal: float = 60.0
    ring_radius: float = 2.6
    height: float = 1.9
    depth_tol: float = 0.05

    def validate(self):
        if self.n_views < 1 or self.image_size < 4:
            raise ConfigError("bad camera config")


@dataclass
class TrainConfig:
    epochs: int = 24
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    accumulate_steps: int = 1
    cls_weight: float = 1.0
    mask_weight: float = 1.0
    kd_weight: float = 1.0
    match_cls_weight: float = 1.0
    match_bce_weight: float = 1.0
    match_dice_weight: float = 1.0
    dice_smooth: float = 1.0
    kd_source: str = "lifted"  # "lifted" (multi-view 2D features) or "direct"
    mask_term_weight: float = 0.1  # stage-2 coefficient on the mask loss
    stage2_epochs: int = 6
    stage2_tasks_per_instance: int = 2
    log_every: int = 25

    def validate(self):
        if self.epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.kd_source not in ("lifted", "direct"):
            raise ConfigError("kd_source must be 'lifted' or 'direct'")
        if self.accumulate_steps < 1:
            raise ConfigError("accumulate_steps must be >= 1")


@dataclass
class EvalConfig:
    dbscan_eps: float = 0.04
    dbscan_min_pts: int = 4
    iou_thresholds: tuple = (0.25, 0.5)

    def validate(self):
        if self.dbscan_eps <= 0 or self.dbscan_min_pts < 1:
            raise ConfigError("bad dbscan parameters")


@dataclass
class RunConfig:
    seed: int = 7
    n_train_scenes: int = 128
    n_val_scenes: int = 32
    scene: SceneConfig = field(default_factory=SceneConfig)
    superpoints: SuperpointConfig = field(default_factory=SuperpointConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ost: OstConfig = field(default_factory=OstConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    cameras: CameraConfig = field(default_factory=CameraConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for section in (
            self.scene,
            self.superpoints,
            self.encoder,
            self.ost,
            self.pipeline,
            self.cameras,
            self.training,
            self.evaluation,
        ):
            section.validate()
        if self.n_train_scenes < 1 or self.n_val_scenes < 1:
            raise ConfigError("scene counts must be >= 1")
        return self


_SECTION_TYPES = {
    "scene": SceneConfig,
    "superpoints": SuperpointConfig,
    "encoder": EncoderConfig,
    "ost": OstConfig,
    "pipeline": PipelineConfig,
    "cameras": CameraConfig,
    "training": TrainConfig,
    "evaluation": EvalConfig,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if cls is RunConfig and key in _SECTION_TYPES:
            kwargs[key] = _build(_SECTION_TYPES[key], value, f"{where}.{key}")
        elif cls is SceneConfig and key == "categories":
            if not isinstance(value, list):
                raise ConfigError(f"{where}.categories: expected a list")
            kwargs[key] = [
                _build(CategorySpec, v, f"{where}.categories[{i}]")
                for i, v in enumerate(value)
            ]
        elif isinstance(value, list) and key in ("channels", "iou_thresholds", "color", "floor_color"):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (list, tuple)):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def default_config() -> RunConfig:
    return RunConfig().validate()
