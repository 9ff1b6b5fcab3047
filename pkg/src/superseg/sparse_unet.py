"""Toy submanifold sparse 3D U-Net over the voxel hash grid.

Occupancy is fixed by geometry (submanifold semantics): a 3x3x3 conv reads
only occupied neighbors and writes only occupied sites. Downsampling halves
keys with floor division and mean-pools children; upsampling copies the
parent feature to every child. Skip connections concatenate channels and mix
with a 1x1x1 conv.

Neighbor pair lists depend only on occupancy, so they are computed once per
scene and cached in the level structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import accel
from .autodiff import Matrix, _record, concat_rows, gather_rows, gelu, linear, segment_mean
from .config import EncoderConfig
from .errors import ShapeError
from .pointcloud import PointCloud, VoxelGrid, pack_keys, unpack_keys, voxelize

_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)
N_TAPS = len(_OFFSETS)
CENTER_TAP = 13  # offset (0, 0, 0)


@dataclass
class GridLevel:
    """Occupancy of one resolution level plus its cached conv pair lists."""

    keys: np.ndarray  # V x 3 int64
    packed: np.ndarray  # V, sorted ascending
    pair_start: np.ndarray  # N_TAPS + 1 prefix into the pair arrays
    pair_out: np.ndarray
    pair_in: np.ndarray

    @property
    def n_voxels(self):
        return int(self.keys.shape[0])


def build_level(keys: np.ndarray) -> GridLevel:
    packed = pack_keys(keys)
    order = np.argsort(packed, kind="stable")
    packed = packed[order]
    keys = np.asarray(keys, dtype=np.int64)[order]

    starts = [0]
    outs = []
    ins = []
    for off in _OFFSETS:
        nbr = pack_keys(keys + off)
        pos = np.searchsorted(packed, nbr)
        pos = np.clip(pos, 0, packed.shape[0] - 1)
        hit = packed[pos] == nbr
        outs.append(np.flatnonzero(hit).astype(np.int64))
        ins.append(pos[hit].astype(np.int64))
        starts.append(starts[-1] + outs[-1].shape[0])
    return GridLevel(
        keys=keys,
        packed=packed,
        pair_start=np.asarray(starts, dtype=np.int64),
        pair_out=np.concatenate(outs) if outs else np.empty(0, np.int64),
        pair_in=np.concatenate(ins) if ins else np.empty(0, np.int64),
    )


def sparse_conv(feats: Matrix, weights: Matrix, bias: Matrix, level: GridLevel) -> Matrix:
    """3x3x3 submanifold convolution; `weights` is (N_TAPS*C_in) x C_out.

    Stacking taps along rows keeps the parameter a plain Matrix; tap k owns
    rows [k*C_in, (k+1)*C_in).
    """
    c_in = feats.cols
    if weights.rows != N_TAPS * c_in:
        raise ShapeError(
            f"conv weights rows {weights.rows} != taps*C_in {N_TAPS * c_in}"
        )
    c_out = weights.cols
    if bias.shape != (1, c_out):
        raise ShapeError("conv bias must be 1 x C_out")
    w3 = np.ascontiguousarray(weights.data.reshape(N_TAPS, c_in, c_out))
    out = accel.conv_forward(
        feats.data, w3, bias.data[0], level.pair_start, level.pair_out, level.pair_in
    )
    result = Matrix(out)

    fd = feats.data
    n_vox = level.n_voxels

    def backward(g):
        g = np.ascontiguousarray(g)
        d_feats = accel.conv_backward_feats(
            g, w3, level.pair_start, level.pair_out, level.pair_in, n_vox
        )
        d_w = accel.conv_backward_weights(
            g, fd, level.pair_start, level.pair_out, level.pair_in, N_TAPS
        )
        return d_feats, d_w.reshape(N_TAPS * c_in, c_out), g.sum(axis=0, keepdims=True)

    _record(result, (feats, weights, bias), backward)
    return result


def downsample_keys(level: GridLevel):
    """Coarse level (stride-2 key halving) and the child->parent index map."""
    parent_keys = np.floor_divide(level.keys, 2)
    packed = pack_keys(parent_keys)
    uniq, parent_of = np.unique(packed, return_inverse=True)
    coarse = build_level(unpack_keys(uniq))
    # build_level sorts by packed key; np.unique output is already sorted, so
    # row order matches and parent_of indexes coarse rows directly
    return coarse, parent_of.astype(np.int64)


def downsample_features(feats: Matrix, parent_of: np.ndarray, n_parents: int) -> Matrix:
    return segment_mean(feats, parent_of, n_parents)


def upsample_features(coarse_feats: Matrix, parent_of: np.ndarray) -> Matrix:
    return gather_rows(coarse_feats, parent_of)


# ---------------------------------------------------------------------------
# U-Net


def init_unet_params(rng: np.random.Generator, cfg: EncoderConfig, in_channels: int = 6):
    """He-style init for each level's 3x3x3 conv, the skip mixers, and the
    output projection."""
    params = {}

    def conv_block(name, c_in, c_out):
        std = math.sqrt(2.0 / (N_TAPS * c_in))
        params[f"{name}.w"] = Matrix(rng.normal(0.0, std, size=(N_TAPS * c_in, c_out)))
        params[f"{name}.b"] = Matrix(np.zeros((1, c_out)))

    def dense(name, c_in, c_out):
        std = math.sqrt(2.0 / c_in)
        params[f"{name}.w"] = Matrix(rng.normal(0.0, std, size=(c_in, c_out)))
        params[f"{name}.b"] = Matrix(np.zeros((1, c_out)))

    prev = in_channels
    for lvl, ch in enumerate(cfg.channels):
        conv_block(f"enc{lvl}", prev, ch)
        prev = ch
    chans = list(cfg.channels)
    for lvl in range(len(chans) - 2, -1, -1):
        dense(f"dec{lvl}", chans[lvl] + chans[lvl + 1], chans[lvl])
    dense("out", chans[0], cfg.out_channels)
    return params


@dataclass
class SceneGrid:
    """Voxelization of one scene plus the per-level occupancy structures."""

    grid: VoxelGrid
    levels: list
    parent_maps: list  # child->parent per transition


def build_scene_grid(pc: PointCloud, cfg: EncoderConfig) -> SceneGrid:
    grid = voxelize(pc, cfg.voxel_size)
    level0 = build_level(grid.keys)
    # voxelize returns rows sorted by packed key, matching build_level order
    assert np.array_equal(level0.packed, grid.packed)
    levels = [level0]
    parent_maps = []
    for _ in range(cfg.levels - 1):
        coarse, parent_of = downsample_keys(levels[-1])
        levels.append(coarse)
        parent_maps.append(parent_of)
    return SceneGrid(grid=grid, levels=levels, parent_maps=parent_maps)


def unet_forward(params, cfg: EncoderConfig, scene: SceneGrid, voxel_feats: Matrix) -> Matrix:
    """Per-voxel features at the finest level, width cfg.out_channels."""
    skips = []
    x = voxel_feats
    n_levels = cfg.levels
    for lvl in range(n_levels):
        x = gelu(sparse_conv(x, params[f"enc{lvl}.w"], params[f"enc{lvl}.b"], scene.levels[lvl]))
        skips.append(x)
        if lvl < n_levels - 1:
            parent_of = scene.parent_maps[lvl]
            x = downsample_features(x, parent_of, scene.levels[lvl + 1].n_voxels)
    for lvl in range(n_levels - 2, -1, -1):
        up = upsample_features(x, scene.parent_maps[lvl])
        cat = concat_cols(skips[lvl], up)
        x = gelu(linear(cat, params[f"dec{lvl}.w"], params[f"dec{lvl}.b"]))
    return linear(x, params["out.w"], params["out.b"])


def concat_cols(a: Matrix, b: Matrix) -> Matrix:
    """Column-wise concatenation (skip connections)."""
    if a.rows != b.rows:
        raise ShapeError("concat_cols: row mismatch")
    out = Matrix(np.concatenate([a.data, b.data], axis=1))
    split = a.cols
    _record(out, (a, b), lambda g: (g[:, :split], g[:, split:]))
    return out


def encode_scene(params, cfg: EncoderConfig, pc: PointCloud, scene: SceneGrid | None = None) -> tuple:
    """Per-point features: run the U-Net on voxel features and devoxelize by
    lookup. Returns (point_features Matrix, SceneGrid)."""
    if scene is None:
        scene = build_scene_grid(pc, cfg)
    voxel_feats = Matrix(scene.grid.features)
    vox_out = unet_forward(params, cfg, scene, voxel_feats)
    point_feats = gather_rows(vox_out, scene.grid.point_to_voxel)
    return point_feats, scene
