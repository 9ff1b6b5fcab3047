"""Point-cloud data model, ASCII PLY import/export, and voxelization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PlyParseError, ShapeError

# 21 bits per axis, biased; collapses an integer voxel key to one int64
_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


@dataclass(frozen=True)
class PointCloud:
    """N points with xyz coordinates (meters) and rgb colors in [0, 1]."""

    coords: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ShapeError(f"coords must be Nx3, got {coords.shape}")
        if colors.shape != coords.shape:
            raise ShapeError(f"colors must match coords, got {colors.shape}")
        if coords.shape[0] < 1:
            raise ShapeError("point cloud must contain at least one point")
        if not np.all(np.isfinite(coords)):
            raise ShapeError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "colors", np.clip(colors, 0.0, 1.0))

    @property
    def n_points(self):
        return self.coords.shape[0]

    def six_channel(self):
        """The raw Nx6 input: xyz concatenated with rgb."""
        return np.concatenate([self.coords, self.colors], axis=1)


def pack_keys(keys):
    """Collapse integer Nx3 voxel keys into sortable int64 scalars."""
    keys = np.asarray(keys, dtype=np.int64)
    if np.any(np.abs(keys) >= _KEY_BIAS - 1):
        raise ShapeError("voxel key out of packable range")
    k = keys + _KEY_BIAS
    return (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]


def unpack_keys(packed):
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty((packed.shape[0], 3), dtype=np.int64)
    out[:, 0] = (packed >> (2 * _KEY_BITS)) - _KEY_BIAS
    out[:, 1] = ((packed >> _KEY_BITS) & _KEY_MASK) - _KEY_BIAS
    out[:, 2] = (packed & _KEY_MASK) - _KEY_BIAS
    return out


@dataclass
class VoxelGrid:
    """Occupied voxels of one scene at a fixed resolution.

    Keys are floor(coord / voxel_size) per component. `packed` is sorted
    ascending and aligned with `keys` and `features`; `point_to_voxel` maps
    each input point to its voxel row.
    """

    voxel_size: float
    keys: np.ndarray
    packed: np.ndarray
    features: np.ndarray
    point_to_voxel: np.ndarray
    counts: np.ndarray = field(repr=False, default=None)

    @property
    def n_voxels(self):
        return self.keys.shape[0]


def voxelize(pc: PointCloud, voxel_size: float) -> VoxelGrid:
    """Mean-pool the 6-channel point inputs into floor-division voxels."""
    if voxel_size <= 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    keys = np.floor(pc.coords / voxel_size).astype(np.int64)
    packed = pack_keys(keys)
    uniq, inverse = np.unique(packed, return_inverse=True)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    feats6 = pc.six_channel()
    sums = np.zeros((uniq.shape[0], 6))
    for c in range(6):
        sums[:, c] = np.bincount(inverse, weights=feats6[:, c], minlength=uniq.shape[0])
    return VoxelGrid(
        voxel_size=float(voxel_size),
        keys=unpack_keys(uniq),
        packed=uniq,
        features=sums / counts[:, None],
        point_to_voxel=inverse.astype(np.int64),
        counts=counts,
    )


# ---------------------------------------------------------------------------
# ASCII PLY

_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_UCHAR_TYPES = {"uchar", "uint8"}


def save_pointcloud(path, pc: PointCloud, labels=None):
    """Write an ASCII PLY. Colors are float properties so round-trips are
    lossless at 1e-6; an optional per-point integer label column is appended."""
    path = Path(path)
    n = pc.n_points
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float red",
        "property float green",
        "property float blue",
    ]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != n:
            raise ShapeError("labels length must match point count")
        lines.append("property int label")
    lines.append("end_header")
    body = []
    for i in range(n):
        vals = [f"{v:.10g}" for v in pc.coords[i]] + [f"{v:.10g}" for v in pc.colors[i]]
        if labels is not None:
            vals.append(str(int(labels[i])))
        body.append(" ".join(vals))
    path.write_text("\n".join(lines + body) + "\n")


def save_mask_overlay(path, pc: PointCloud, mask):
    """Write the cloud with a 0/1 label column; masked points tinted red."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != pc.n_points:
        raise ShapeError("mask length must match point count")
    colors = pc.colors.copy()
    colors[mask] = 0.65 * colors[mask] + 0.35 * np.array([1.0, 0.0, 0.0])
    save_pointcloud(path, PointCloud(pc.coords, colors), labels=mask.astype(np.int64))


def load_pointcloud(path):
    """Parse an ASCII PLY with x/y/z and optional colors and label column.

    Returns (PointCloud, labels-or-None). uchar colors are scaled by 1/255;
    missing colors default to 0.5. Malformed input raises PlyParseError with
    the offending line number.
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise PlyParseError("empty file", line=1)
    if lines[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic", line=1)

    n_vertex = None
    props = []  # (name, type) for the vertex element only
    in_vertex = False
    data_start = None
    fmt_seen = False
    for ln, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise PlyParseError("only ascii format supported", line=ln)
            fmt_seen = True
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError("malformed element line", line=ln)
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(parts[2])
                except ValueError:
                    raise PlyParseError("bad vertex count", line=ln) from None
        elif parts[0] == "property":
            if in_vertex:
                if len(parts) != 3:
                    raise PlyParseError("malformed property line", line=ln)
                props.append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            data_start = ln
            break
        else:
            raise PlyParseError(f"unexpected header keyword {parts[0]!r}", line=ln)
    if data_start is None:
        raise PlyParseError("missing end_header", line=len(lines))
    if not fmt_seen:
        raise PlyParseError("missing format line", line=1)
    if n_vertex is None:
        raise PlyParseError("missing vertex element", line=1)

    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyParseError(f"missing required property {axis!r}", line=data_start)

    rows = np.zeros((n_vertex, len(props)))
    filled = 0
    for ln, raw in enumerate(lines[data_start:], start=data_start + 1):
        if not raw.strip():
            continue
        if filled >= n_vertex:
            break
        vals = raw.split()
        if len(vals) != len(props):
            raise PlyParseError(
                f"expected {len(props)} values, got {len(vals)}", line=ln
            )
        try:
            rows[filled] = [float(v) for v in vals]
        except ValueError:
            raise PlyParseError("non-numeric vertex value", line=ln) from None
        filled += 1
    if filled != n_vertex:
        raise PlyParseError(
            f"expected {n_vertex} vertices, got {filled}", line=len(lines)
        )

    col = {name: rows[:, i] for i, (name, _) in enumerate(props)}
    coords = np.stack([col["x"], col["y"], col["z"]], axis=1)
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1)
        types = dict(props)
        if types["red"] in _UCHAR_TYPES:
            colors = colors / 255.0
    else:
        colors = np.full((n_vertex, 3), 0.5)
    labels = col["label"].astype(np.int64) if "label" in names else None
    return PointCloud(coords, colors), labels


# ---------------------------------------------------------------------------
# scene annotation sidecar


def save_scene_annotation(path, instance_labels, semantic_labels, categories,
                          teacher_features=None, teacher_path=None):
    """JSON sidecar with instance/semantic ids; teacher features go to a
    binary .npy companion when given."""
    path = Path(path)
    doc = {
        "instance_labels": np.asarray(instance_labels, dtype=np.int64).tolist(),
        "semantic_labels": np.asarray(semantic_labels, dtype=np.int64).tolist(),
        "categories": list(categories),
    }
    if teacher_features is not None:
        if teacher_path is None:
            teacher_path = path.with_suffix("").name + ".teacher.npy"
        np.save(path.parent / teacher_path, np.asarray(teacher_features, dtype=np.float64))
        doc["teacher_file"] = str(teacher_path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_scene_annotation(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    out = {
        "instance_labels": np.asarray(doc["instance_labels"], dtype=np.int64),
        "semantic_labels": np.asarray(doc["semantic_labels"], dtype=np.int64),
        "categories": list(doc["categories"]),
        "teacher_features": None,
    }
    if "teacher_file" in doc:
        out["teacher_features"] = np.load(path.parent / doc["teacher_file"])
    return out
