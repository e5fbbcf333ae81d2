"""Keypoint depth supervision and direct depth-map refinement.

The sparse-keypoint depth loss measures how well per-view depth maps agree
with triangulated 3-D keypoints. refine_depth() descends that loss (plus a
total-variation smoothness term) directly on the depth grid, standing in
for depth-supervised radiance-field training at desk scale.

Both terms use a Charbonnier-smoothed absolute value, sqrt(x^2 + eps^2) -
eps, so the objective is C1 and the analytic gradient matches central
finite differences away from machine noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, DepthMap, PixelCoord, nearest_pixel, sample_depth
from .errors import NoObservationsError, OutOfFrameError
from .scene import Keypoint3D

CHARBONNIER_EPS = 1e-3
_DEPTH_FLOOR = 1e-9


@dataclass
class DepthLossReport:
    loss: float  # mean absolute residual over valid observations
    per_keypoint_residuals: list[tuple[int, PixelCoord, float]]


def observations_for_view(
    keypoints: list[Keypoint3D], view_id: int
) -> list[tuple[PixelCoord, np.ndarray]]:
    """All (pixel, world position) observations of one view."""
    out = []
    for kp in keypoints:
        for vid, pix in kp.observing_views:
            if vid == view_id:
                out.append((pix, kp.position))
    return out


def keypoint_depth_loss(
    depth_maps: dict[int, DepthMap],
    keypoints: list[Keypoint3D],
    cameras: dict[int, Camera],
) -> DepthLossReport:
    """Mean absolute difference between sampled depth and keypoint depth.

    For every observation (view, pixel) of every keypoint, the residual is
    the nearest-neighbor depth sample at the observed pixel minus the
    keypoint's z-depth in that camera. Observations landing on invalid
    depth pixels are skipped; views absent from depth_maps are ignored.

    Raises:
        NoObservationsError: no keypoints, or every observation skipped.
        OutOfFrameError: an observation lies outside its view.
    """
    if not keypoints:
        raise NoObservationsError("empty keypoint set")
    residuals: list[tuple[int, PixelCoord, float]] = []
    for kp in keypoints:
        for view_id, pix in kp.observing_views:
            depth = depth_maps.get(view_id)
            cam = cameras.get(view_id)
            if depth is None or cam is None:
                continue
            sampled, valid = sample_depth(depth, pix)
            if not valid:
                continue
            z = float(cam.world_to_camera(kp.position)[2])
            residuals.append((view_id, pix, sampled - z))
    if not residuals:
        raise NoObservationsError("no valid keypoint observations")
    loss = float(np.mean([abs(r) for _, _, r in residuals]))
    return DepthLossReport(loss=loss, per_keypoint_residuals=residuals)


def _charbonnier(x: np.ndarray, eps: float) -> np.ndarray:
    return np.sqrt(x * x + eps * eps) - eps


def _charbonnier_grad(x: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(x * x + eps * eps)


def refine_objective(
    values: np.ndarray,
    valid: np.ndarray,
    obs_flat: np.ndarray,
    obs_target: np.ndarray,
    smoothness_lambda: float,
    eps: float = CHARBONNIER_EPS,
) -> tuple[float, np.ndarray]:
    """Loss and analytic gradient of the refinement objective.

    data term:   mean over observations of charbonnier(D[p] - z_p)
    smooth term: lambda * mean over valid neighbor pairs of
                 charbonnier(forward difference)

    The gradient is zero at invalid pixels.
    """
    h, w = values.shape
    flat = values.reshape(-1)
    grad = np.zeros_like(values)
    loss = 0.0

    n_obs = obs_flat.size
    if n_obs:
        r = flat[obs_flat] - obs_target
        loss += float(_charbonnier(r, eps).sum() / n_obs)
        np.add.at(grad.reshape(-1), obs_flat, _charbonnier_grad(r, eps) / n_obs)

    if smoothness_lambda > 0:
        pair_x = valid[:, 1:] & valid[:, :-1]
        pair_y = valid[1:, :] & valid[:-1, :]
        m = int(pair_x.sum() + pair_y.sum())
        if m:
            scale = smoothness_lambda / m
            dx = np.where(pair_x, values[:, 1:] - values[:, :-1], 0.0)
            dy = np.where(pair_y, values[1:, :] - values[:-1, :], 0.0)
            loss += float(scale * (_charbonnier(dx, eps)[pair_x].sum() + _charbonnier(dy, eps)[pair_y].sum()))
            gx = np.where(pair_x, _charbonnier_grad(dx, eps), 0.0) * scale
            gy = np.where(pair_y, _charbonnier_grad(dy, eps), 0.0) * scale
            grad[:, 1:] += gx
            grad[:, :-1] -= gx
            grad[1:, :] += gy
            grad[:-1, :] -= gy

    grad[~valid] = 0.0
    return loss, grad


def refine_depth(
    depth_map: DepthMap,
    keypoints_for_view: list[tuple[PixelCoord, np.ndarray]],
    camera: Camera,
    smoothness_lambda: float = 0.1,
    steps: int = 100,
    step_size: float = 1.0,
    charbonnier_eps: float = CHARBONNIER_EPS,
) -> DepthMap:
    """Gradient-descent refinement of one depth map against its keypoints.

    Runs plain descent with backtracking: whenever a step would increase the
    objective, the step size is halved and the step retried, so the loss is
    non-increasing over accepted steps. steps=0 returns the input unchanged.
    A larger charbonnier_eps widens the quadratic zone of the robust loss,
    trading some outlier robustness for faster plain-descent convergence.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")

    values = depth_map.values.copy()
    valid = depth_map.valid.copy()
    if steps == 0:
        return DepthMap(values=values, valid=valid)

    h, w = values.shape
    obs_flat = []
    obs_target = []
    for pix, pos in keypoints_for_view:
        x, y = nearest_pixel(pix[0], pix[1])
        if not (0 <= x < w and 0 <= y < h):
            raise OutOfFrameError(f"keypoint observation {tuple(pix)} outside {w}x{h} depth map")
        if not valid[y, x]:
            continue
        obs_flat.append(y * w + x)
        obs_target.append(float(camera.world_to_camera(pos)[2]))
    obs_flat = np.asarray(obs_flat, dtype=np.int64)
    obs_target = np.asarray(obs_target, dtype=np.float64)

    loss, grad = refine_objective(values, valid, obs_flat, obs_target, smoothness_lambda, charbonnier_eps)
    for _ in range(steps):
        while True:
            candidate = np.where(valid, np.maximum(values - step_size * grad, _DEPTH_FLOOR), values)
            cand_loss, cand_grad = refine_objective(
                candidate, valid, obs_flat, obs_target, smoothness_lambda, charbonnier_eps
            )
            if cand_loss <= loss:
                values, loss, grad = candidate, cand_loss, cand_grad
                break
            step_size *= 0.5
            if step_size < 1e-12:
                return DepthMap(values=np.where(valid, values, 0.0), valid=valid)
    return DepthMap(values=np.where(valid, values, 0.0), valid=valid)
