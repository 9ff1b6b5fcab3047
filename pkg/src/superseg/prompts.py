"""Visual prompts: click / box / mask types, the parameter-free sampler that
turns a prompt into a point-feature row, and prompt encoders.

The default encoder reuses the superpoint transformer: the sampled prompt
feature is appended as an extra query (distance bias from the prompt
centroid) and its alignment-head row is the prompt embedding. Two simpler
paradigms used for ablations are provided: a coordinate MLP and plain region
pooling behind a learned projection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Matrix, gelu, linear
from .errors import ConfigError, EmptyPromptError, ShapeError
from .transformer import ExtraQuery, run_extra_query

CLICK_EPS = 1e-8  # meters; below this a click snaps to the exact point


@dataclass(frozen=True)
class ClickPrompt:
    xyz: tuple

    kind = "click"


@dataclass(frozen=True)
class BoxPrompt:
    min_corner: tuple
    max_corner: tuple

    kind = "box"

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64)
        hi = np.asarray(self.max_corner, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ShapeError("box corners must be 3-vectors")
        if np.any(lo > hi):
            raise ConfigError("box min corner must be <= max corner componentwise")


@dataclass(frozen=True)
class MaskPrompt:
    indices: tuple

    kind = "mask"

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ConfigError("mask prompt must reference at least one point")


def prompt_from_dict(doc: dict):
    """Parse the prompt JSON schema: {"type": "click"|"box"|"mask", ...}."""
    kind = doc.get("type")
    if kind == "click":
        return ClickPrompt(xyz=tuple(doc["point"]))
    if kind == "box":
        return BoxPrompt(min_corner=tuple(doc["min"]), max_corner=tuple(doc["max"]))
    if kind == "mask":
        return MaskPrompt(indices=tuple(int(i) for i in doc["indices"]))
    raise ConfigError(f"unknown prompt type {kind!r}")


def prompt_to_dict(prompt) -> dict:
    if prompt.kind == "click":
        return {"type": "click", "point": list(prompt.xyz)}
    if prompt.kind == "box":
        return {"type": "box", "min": list(prompt.min_corner), "max": list(prompt.max_corner)}
    return {"type": "mask", "indices": list(prompt.indices)}


def load_prompts(path):
    return [prompt_from_dict(d) for d in json.loads(open(path).read())]


# ---------------------------------------------------------------------------
# parameter-free visual sampler


def sample_click(prompt: ClickPrompt, point_coords: np.ndarray, point_features: np.ndarray):
    """Three-nearest-neighbor inverse-distance interpolation of point
    features at the click position. An exact hit returns that point's
    feature unchanged."""
    coords = np.asarray(point_coords, dtype=np.float64)
    feats = np.asarray(point_features, dtype=np.float64)
    xyz = np.asarray(prompt.xyz, dtype=np.float64).reshape(1, 3)
    d = np.sqrt(np.sum((coords - xyz) ** 2, axis=1))
    k = min(3, coords.shape[0])
    nearest = np.argsort(d, kind="stable")[:k]
    if d[nearest[0]] < CLICK_EPS:
        return feats[nearest[0]].copy()
    w = 1.0 / (d[nearest] + CLICK_EPS)
    w = w / w.sum()
    return w @ feats[nearest]


def region_indices(prompt, point_coords: np.ndarray) -> np.ndarray:
    """Point indices selected by a box (closed interval) or mask prompt."""
    if prompt.kind == "box":
        lo = np.asarray(prompt.min_corner)
        hi = np.asarray(prompt.max_corner)
        inside = np.all((point_coords >= lo) & (point_coords <= hi), axis=1)
        return np.flatnonzero(inside)
    if prompt.kind == "mask":
        return np.asarray(prompt.indices, dtype=np.int64)
    raise ConfigError(f"{prompt.kind} prompt has no region")


def sample_region(prompt, point_coords: np.ndarray, point_features: np.ndarray):
    """Mean feature over the points the prompt selects."""
    idx = region_indices(prompt, point_coords)
    if idx.shape[0] == 0:
        raise EmptyPromptError("prompt region contains no points")
    return np.asarray(point_features, dtype=np.float64)[idx].mean(axis=0)


def sample_prompt(prompt, point_coords, point_features):
    """Dispatch to the click or region sampler; returns (feature, centroid)."""
    if prompt.kind == "click":
        feat = sample_click(prompt, point_coords, point_features)
        centroid = np.asarray(prompt.xyz, dtype=np.float64)
    else:
        idx = region_indices(prompt, point_coords)
        if idx.shape[0] == 0:
            raise EmptyPromptError("prompt region contains no points")
        feat = np.asarray(point_features, dtype=np.float64)[idx].mean(axis=0)
        centroid = np.asarray(point_coords, dtype=np.float64)[idx].mean(axis=0)
    return feat, centroid


# ---------------------------------------------------------------------------
# prompt encoders


def encode_prompt(ost_params, ost_cfg, block_ctx, centroids, prompt_feature,
                  prompt_centroid) -> Matrix:
    """Embed a sampled prompt by running it through the superpoint
    transformer as an appended query; returns the alignment row (1 x C_a)."""
    feature = prompt_feature if isinstance(prompt_feature, Matrix) else Matrix(
        np.asarray(prompt_feature, dtype=np.float64).reshape(1, -1)
    )
    eq = ExtraQuery(feature=feature, policy="distance", centroid=prompt_centroid)
    out = run_extra_query(ost_params, ost_cfg, block_ctx, eq, centroids)
    return out.alignment


def prompt_coord_vector(prompt, point_coords=None) -> np.ndarray:
    """Fixed-length serialization: [min xyz, max xyz]. Clicks pad to a
    degenerate box; mask prompts use their bounding box."""
    if prompt.kind == "click":
        p = np.asarray(prompt.xyz, dtype=np.float64)
        return np.concatenate([p, p])
    if prompt.kind == "box":
        return np.concatenate([
            np.asarray(prompt.min_corner, dtype=np.float64),
            np.asarray(prompt.max_corner, dtype=np.float64),
        ])
    if point_coords is None:
        raise ConfigError("mask prompt serialization needs point coordinates")
    pts = np.asarray(point_coords)[np.asarray(prompt.indices, dtype=np.int64)]
    return np.concatenate([pts.min(axis=0), pts.max(axis=0)])


def init_coordproj_params(rng: np.random.Generator, hidden: int, out_dim: int):
    def dense(name, c_in, c_out):
        std = math.sqrt(1.0 / c_in)
        return {
            f"{name}.w": Matrix(rng.normal(0.0, std, size=(c_in, c_out))),
            f"{name}.b": Matrix(np.zeros((1, c_out))),
        }

    params = {}
    params.update(dense("mlp1", 6, hidden))
    params.update(dense("mlp2", hidden, out_dim))
    return params


def encode_prompt_coordproj(prompt, params, point_coords=None) -> Matrix:
    """Paradigm (a): an MLP over the serialized prompt coordinates."""
    vec = Matrix(prompt_coord_vector(prompt, point_coords).reshape(1, 6))
    h = gelu(linear(vec, params["mlp1.w"], params["mlp1.b"]))
    return linear(h, params["mlp2.w"], params["mlp2.b"])


def init_poolproj_params(rng: np.random.Generator, feat_dim: int, out_dim: int):
    std = math.sqrt(1.0 / feat_dim)
    return {
        "pool.w": Matrix(rng.normal(0.0, std, size=(feat_dim, out_dim))),
        "pool.b": Matrix(np.zeros((1, out_dim))),
    }


def encode_prompt_poolonly(prompt, point_coords, point_features, params=None) -> Matrix:
    """Paradigm (b): region pooling, optionally through a learned linear map.

    With params=None the pooled feature is returned as-is (identity
    projection)."""
    feat, _ = sample_prompt(prompt, point_coords, point_features)
    m = Matrix(feat.reshape(1, -1))
    if params is None:
        return m
    return linear(m, params["pool.w"], params["pool.b"])
