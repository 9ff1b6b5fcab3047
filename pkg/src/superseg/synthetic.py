"""Seeded synthetic scenes: floor plane plus shape-template objects, with
ground-truth instances and per-point teacher features.

Generation is a pure function of (seed, config): identical inputs produce
bitwise-identical scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SceneConfig
from .errors import ConfigError
from .pointcloud import PointCloud


@dataclass(frozen=True)
class SyntheticScene:
    pc: PointCloud
    instance_labels: np.ndarray  # N, -1 = background
    semantic_labels: np.ndarray  # N, category id, -1 = background
    teacher_features: np.ndarray  # N x C2, rows unit-norm
    instance_semantics: np.ndarray  # per-instance category id

    @property
    def n_instances(self):
        return int(self.instance_semantics.shape[0])

    def instance_mask(self, instance_id):
        return self.instance_labels == instance_id


def category_embeddings(cfg: SceneConfig, master_seed: int = 0):
    """Unit-norm teacher embedding per category plus one background row.

    Depends only on (category count, teacher_dim, master_seed) so every
    scene of a run shares the same prototypes.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, 0x7EAC])))
    emb = rng.standard_normal((cfg.num_categories + 1, cfg.teacher_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return emb


def _sample_box(rng, n, size3):
    """Uniform points on the surface of an axis-aligned box, area-weighted."""
    sx, sy, sz = size3
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        f = face[i]
        if f < 2:
            pts[i] = ((-0.5 if f == 0 else 0.5) * sx, u[i] * sy, v[i] * sz)
        elif f < 4:
            pts[i] = (u[i] * sx, (-0.5 if f == 2 else 0.5) * sy, v[i] * sz)
        else:
            pts[i] = (u[i] * sx, v[i] * sy, (-0.5 if f == 4 else 0.5) * sz)
    pts[:, 2] += 0.5 * sz  # rest on the floor
    return pts


def _sample_sphere(rng, n, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * radius
    pts[:, 2] += radius
    return pts


def _sample_cylinder(rng, n, radius, height):
    lateral = 2.0 * np.pi * radius * height
    cap = np.pi * radius * radius
    p = np.array([lateral, cap, cap])
    part = rng.choice(3, size=n, p=p / p.sum())
    pts = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    for i in range(n):
        if part[i] == 0:
            z = rng.uniform(0.0, height)
            pts[i] = (radius * np.cos(theta[i]), radius * np.sin(theta[i]), z)
        else:
            r = radius * np.sqrt(rng.uniform())
            z = 0.0 if part[i] == 1 else height
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), z)
    return pts


def _place_centers(rng, n, extent, min_sep):
    """Rejection-sample object centers; relaxes the separation if crowded."""
    half = extent / 2.0 - 0.35
    sep = min_sep
    centers = []
    attempts = 0
    while len(centers) < n:
        cand = rng.uniform(-half, half, size=2)
        if all(np.hypot(*(cand - c)) >= sep for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts > 200:
            sep *= 0.85
            attempts = 0
    return np.array(centers)


def generate_scene(seed: int, cfg: SceneConfig, scene_index: int = 0) -> SyntheticScene:
    """Deterministic scene with >= instances_min objects and a floor plane."""
    cfg.validate()
    if cfg.num_categories == 0:
        raise ConfigError("cannot generate a scene with zero categories")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, scene_index])))

    n_obj = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
    cat_ids = rng.integers(0, cfg.num_categories, size=n_obj)
    centers = _place_centers(rng, n_obj, cfg.floor_extent, cfg.min_separation)

    coords_parts = []
    colors_parts = []
    inst_parts = []
    sem_parts = []

    # floor
    half = cfg.floor_extent / 2.0
    floor = np.empty((cfg.floor_points, 3))
    floor[:, 0] = rng.uniform(-half, half, size=cfg.floor_points)
    floor[:, 1] = rng.uniform(-half, half, size=cfg.floor_points)
    floor[:, 2] = rng.normal(0.0, cfg.coord_noise, size=cfg.floor_points)
    coords_parts.append(floor)
    colors_parts.append(
        np.asarray(cfg.floor_color)
        + rng.normal(0.0, cfg.color_noise, size=(cfg.floor_points, 3))
    )
    inst_parts.append(np.full(cfg.floor_points, -1, dtype=np.int64))
    sem_parts.append(np.full(cfg.floor_points, -1, dtype=np.int64))

    for inst, cat in enumerate(cat_ids):
        spec = cfg.categories[cat]
        n = cfg.points_per_object
        if spec.shape == "box":
            base = rng.uniform(spec.size_min, spec.size_max)
            size3 = (base, base * rng.uniform(0.7, 1.3), base * rng.uniform(0.5, 1.0))
            pts = _sample_box(rng, n, size3)
        elif spec.shape == "sphere":
            pts = _sample_sphere(rng, n, rng.uniform(spec.size_min, spec.size_max))
        else:
            radius = 0.5 * rng.uniform(spec.size_min, spec.size_max)
            height = rng.uniform(spec.size_min, spec.size_max)
            pts = _sample_cylinder(rng, n, radius, height)
        pts = pts + rng.normal(0.0, cfg.coord_noise, size=pts.shape)
        pts[:, :2] += centers[inst]
        coords_parts.append(pts)
        tint = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
        colors_parts.append(
            np.asarray(spec.color)
            + tint
            + rng.normal(0.0, cfg.color_noise, size=(n, 3))
        )
        inst_parts.append(np.full(n, inst, dtype=np.int64))
        sem_parts.append(np.full(n, cat, dtype=np.int64))

    coords = np.concatenate(coords_parts)
    colors = np.clip(np.concatenate(colors_parts), 0.0, 1.0)
    instance_labels = np.concatenate(inst_parts)
    semantic_labels = np.concatenate(sem_parts)

    emb = category_embeddings(cfg, master_seed=seed)
    rows = np.where(semantic_labels < 0, cfg.num_categories, semantic_labels)
    teacher = emb[rows]
    if cfg.teacher_noise > 0:
        teacher = teacher + rng.normal(0.0, cfg.teacher_noise, size=teacher.shape)
    teacher = teacher / np.linalg.norm(teacher, axis=1, keepdims=True)

    return SyntheticScene(
        pc=PointCloud(coords, colors),
        instance_labels=instance_labels,
        semantic_labels=semantic_labels,
        teacher_features=teacher,
        instance_semantics=cat_ids.astype(np.int64),
    )
