"""Pinhole cameras, point projection with depth-test visibility, bilinear
feature sampling, and multi-view feature lifting onto points.

Synthetic teacher views are rendered by splatting per-point features into a
z-buffered image, so lifting them back recovers the teacher signal for
visible points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

_Z_NEAR = 1e-6


@dataclass
class Camera:
    intrinsics: np.ndarray  # 3 x 3
    world_to_camera: np.ndarray  # 4 x 4
    features: np.ndarray  # H x W x C
    depth: np.ndarray  # H x W meters, 0 = no data

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ShapeError("intrinsics must be 3x3")
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ShapeError("intrinsics must be invertible")
        if self.world_to_camera.shape != (4, 4):
            raise ShapeError("world_to_camera must be 4x4")
        self.features = np.asarray(self.features, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if np.any(self.depth < 0):
            raise ShapeError("depth map must be non-negative")

    @property
    def image_hw(self):
        return self.depth.shape


def project_points(coords: np.ndarray, cam: Camera, depth_tol: float = 0.05):
    """Perspective projection. Returns (uv, z, visible); a point is visible
    when it lies in front of the camera, inside the image, and its depth
    agrees with the rendered depth map within depth_tol."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    homo = np.concatenate([coords, np.ones((n, 1))], axis=1)
    cam_pts = homo @ cam.world_to_camera.T
    z = cam_pts[:, 2]
    in_front = z > _Z_NEAR
    safe_z = np.where(in_front, z, 1.0)
    uv = (cam_pts[:, :3] / safe_z[:, None]) @ cam.intrinsics.T
    uv = uv[:, :2]
    h, w = cam.image_hw
    inside = (
        in_front
        & (uv[:, 0] >= 0.0)
        & (uv[:, 0] <= w - 1.0)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] <= h - 1.0)
    )
    visible = inside.copy()
    if np.any(inside):
        cols = np.clip(np.rint(uv[inside, 0]).astype(np.int64), 0, w - 1)
        rows = np.clip(np.rint(uv[inside, 1]).astype(np.int64), 0, h - 1)
        dmap = cam.depth[rows, cols]
        ok = (dmap > 0.0) & (np.abs(z[inside] - dmap) <= depth_tol)
        visible[np.flatnonzero(inside)] = ok
    return uv, z, visible


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of an H x W x C image at pixel coordinates."""
    h, w = image.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    top = image[v0, u0] * (1 - fu) + image[v0, u1] * fu
    bot = image[v1, u0] * (1 - fu) + image[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def lift_features(cams, coords: np.ndarray, depth_tol: float = 0.05):
    """Mean of bilinear-sampled view features over the views where each point
    is visible. Returns (features N x C, valid N bool); points visible in no
    view are invalid and excluded from distillation."""
    if len(cams) == 0:
        raise ShapeError("lift_features needs at least one camera")
    n = np.asarray(coords).shape[0]
    c = cams[0].features.shape[2]
    acc = np.zeros((n, c))
    hits = np.zeros(n)
    for cam in cams:
        uv, _, visible = project_points(coords, cam, depth_tol)
        if not np.any(visible):
            continue
        acc[visible] += bilinear_sample(cam.features, uv[visible])
        hits[visible] += 1.0
    valid = hits > 0
    out = np.zeros((n, c))
    out[valid] = acc[valid] / hits[valid, None]
    return out, valid


# ---------------------------------------------------------------------------
# synthetic views


def make_ring_cameras(center, radius, height, n_views, image_size, focal):
    """Pinhole cameras on a ring, all looking at `center`. Feature/depth maps
    start empty; fill them with `render_views`."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    intr = np.array(
        [
            [focal, 0.0, (image_size - 1) / 2.0],
            [0.0, focal, (image_size - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    for i in range(n_views):
        ang = 2.0 * np.pi * i / n_views
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        fwd = center - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)  # +v axis points down-image
        rot = np.stack([right, down, fwd])  # world -> camera axes
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        cams.append(
            Camera(
                intrinsics=intr,
                world_to_camera=w2c,
                features=np.zeros((image_size, image_size, 1)),
                depth=np.zeros((image_size, image_size)),
            )
        )
    return cams


def render_views(cams, coords: np.ndarray, point_features: np.ndarray):
    """Splat per-point features into each camera with a nearest-point
    z-buffer, producing consistent feature and depth maps in place."""
    feats = np.asarray(point_features, dtype=np.float64)
    for cam in cams:
        h, w = cam.image_hw
        cam.features = np.zeros((h, w, feats.shape[1]))
        cam.depth = np.zeros((h, w))
        uv, z, _ = project_points(coords, cam, depth_tol=np.inf)
        in_front = z > _Z_NEAR
        inside = (
            in_front
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= w - 1)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= h - 1)
        )
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            continue
        # nearest point wins each pixel; write far-to-near so the last
        # write is the closest point (stable under fixed point order)
        order = idx[np.argsort(-z[idx], kind="stable")]
        ocols = np.rint(uv[order, 0]).astype(np.int64)
        orows = np.rint(uv[order, 1]).astype(np.int64)
        cam.depth[orows, ocols] = z[order]
        cam.features[orows, ocols] = feats[order]
    return cams
