"""Pinhole camera model: projection, backprojection, cross-view reprojection.

All geometry runs in float64. Continuous pixel coordinates use the
convention that integer coordinates sit at pixel centers, so pixel (0, 0)
covers [-0.5, 0.5) x [-0.5, 0.5) and an image of width W spans
[-0.5, W - 0.5) along u.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    BehindCameraError,
    InvalidDepthError,
    OutOfFrameError,
)

MIN_DEPTH = 1e-9

# Neighboring depth samples whose ratio exceeds this are treated as a depth
# discontinuity; interpolating across one would manufacture phantom surfaces.
DEPTH_EDGE_RATIO = 1.2


class PixelCoord(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera with a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.2e})")
        det = float(np.linalg.det(self.rotation))
        if abs(det - 1.0) > 1e-6:
            raise ValueError(f"rotation must be proper (det=+1), got det={det}")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def contains(self, u: float, v: float) -> bool:
        """True when (u, v) lies inside the pixel grid footprint."""
        return -0.5 <= u < self.width - 0.5 and -0.5 <= v < self.height - 0.5

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass
class DepthMap:
    """Per-pixel metric depth with an explicit validity grid.

    Valid pixels always hold strictly positive depth; loaders mark
    nonpositive or nonfinite values invalid.
    """

    values: np.ndarray  # (H, W) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {self.values.shape}")
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask shape does not match depth values")
        if np.any(self.values[self.valid] <= 0):
            raise ValueError("valid depth pixels must be strictly positive")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0)
        return cls(values=np.where(valid, values, 0.0), valid=valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def nearest_pixel(u: float, v: float) -> tuple[int, int]:
    """Round a continuous coordinate to its pixel (half-up, deterministic)."""
    return int(np.floor(u + 0.5)), int(np.floor(v + 0.5))


def project(camera: Camera, point: np.ndarray) -> tuple[PixelCoord, float]:
    """Project a world point; returns (pixel, depth).

    Raises:
        BehindCameraError: when the camera-space z is at or below MIN_DEPTH.
    """
    pc = camera.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    z = float(pc[2])
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point has camera depth {z:.3e}")
    u = camera.fx * pc[0] / z + camera.cx
    v = camera.fy * pc[1] / z + camera.cy
    return PixelCoord(float(u), float(v)), z


def project_many(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (uv (N, 2), depth (N,)), no bounds checks.

    Rows with depth <= MIN_DEPTH get uv set to NaN; callers filter by depth.
    """
    pc = camera.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    safe = np.where(z > MIN_DEPTH, z, np.nan)
    uv = np.empty((pc.shape[0], 2), dtype=np.float64)
    uv[:, 0] = camera.fx * pc[:, 0] / safe + camera.cx
    uv[:, 1] = camera.fy * pc[:, 1] / safe + camera.cy
    return uv, z


def backproject(camera: Camera, pixel: PixelCoord | tuple[float, float], depth: float) -> np.ndarray:
    """Invert project: world point whose projection is (pixel, depth).

    Raises:
        InvalidDepthError: for depth <= 0.
    """
    if depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    pc = np.array(
        [(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth],
        dtype=np.float64,
    )
    return camera.camera_to_world(pc)


def backproject_many(camera: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Vectorized backprojection of (N, 2) pixels with (N,) positive depths."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    pc = np.empty((uv.shape[0], 3), dtype=np.float64)
    pc[:, 0] = (uv[:, 0] - camera.cx) / camera.fx * depth
    pc[:, 1] = (uv[:, 1] - camera.cy) / camera.fy * depth
    pc[:, 2] = depth
    return camera.camera_to_world(pc)


def reproject(
    pixel: PixelCoord | tuple[float, float],
    depth_ref: float,
    cam_ref: Camera,
    cam_k: Camera,
) -> tuple[PixelCoord, float]:
    """Map a reference pixel with known depth into another camera.

    Returns the target pixel and the reprojected depth (camera-space z in
    cam_k).

    Raises:
        InvalidDepthError: nonpositive depth_ref.
        BehindCameraError: the point lies behind cam_k.
        OutOfFrameError: the target pixel falls outside cam_k's grid.
    """
    point = backproject(cam_ref, pixel, depth_ref)
    target, depth = project(cam_k, point)
    if not cam_k.contains(target.u, target.v):
        raise OutOfFrameError(f"reprojected pixel {target} outside {cam_k.width}x{cam_k.height} frame")
    return target, depth


def sample_depth(depth_map: DepthMap, pixel: PixelCoord | tuple[float, float]) -> tuple[float, bool]:
    """Nearest-neighbor depth lookup; returns (value, valid flag).

    Raises:
        OutOfFrameError: pixel outside the grid footprint.
    """
    u, v = float(pixel[0]), float(pixel[1])
    h, w = depth_map.values.shape
    if not (-0.5 <= u < w - 0.5 and -0.5 <= v < h - 0.5):
        raise OutOfFrameError(f"pixel ({u}, {v}) outside {w}x{h} depth map")
    x, y = nearest_pixel(u, v)
    return float(depth_map.values[y, x]), bool(depth_map.valid[y, x])


def sample_depth_bilinear(
    depth_map: DepthMap,
    uv: np.ndarray,
    edge_ratio: float = DEPTH_EDGE_RATIO,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup at continuous coordinates, vectorized.

    Interpolation runs in inverse-depth space, which is affine in pixel
    coordinates for planar surfaces, so planar depth maps are reproduced
    exactly at subpixel positions. A sample is invalid when the coordinate
    leaves [0, W-1] x [0, H-1], when any contributing corner is invalid, or
    when contributing corners straddle a depth edge (max/min > edge_ratio).
    Corners with zero interpolation weight do not participate.

    Returns:
        (depth (N,), ok (N,)) where depth is 0 for invalid samples.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    h, w = depth_map.values.shape
    u, v = uv[:, 0], uv[:, 1]
    eps = 1e-9  # same slack as the active-corner cutoff below
    ok = (u >= -eps) & (u <= w - 1.0 + eps) & (v >= -eps) & (v <= h - 1.0 + eps)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(vc), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0

    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=0
    )
    vals = np.stack(
        [
            depth_map.values[y0, x0],
            depth_map.values[y0, x1],
            depth_map.values[y1, x0],
            depth_map.values[y1, x1],
        ],
        axis=0,
    )
    valid = np.stack(
        [
            depth_map.valid[y0, x0],
            depth_map.valid[y0, x1],
            depth_map.valid[y1, x0],
            depth_map.valid[y1, x1],
        ],
        axis=0,
    )

    # Corners with vanishing weight are ignored entirely; float jitter in
    # reprojection roundtrips must not activate a neighboring cell.
    active = weights > 1e-9
    ok &= np.all(valid | ~active, axis=0)

    usable = active & valid
    vmax = np.max(np.where(usable, vals, -np.inf), axis=0)
    vmin = np.min(np.where(usable, vals, np.inf), axis=0)
    ok &= np.isfinite(vmin) & (vmin > 0) & (vmax <= vmin * edge_ratio)

    inv = np.where(usable & (vals > 0), 1.0 / np.where(vals > 0, vals, 1.0), 0.0)
    denom = (weights * inv).sum(axis=0)
    depth = np.where(ok & (denom > 0), 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    ok &= depth > 0
    return depth, ok
