"""Bake edited views onto a 3-D point set and measure cross-view agreement.

Every foreground pixel with valid depth backprojects to a world point
carrying its edited color and a confidence. Points are fused on a voxel
grid by confidence-weighted averaging; the per-cell color spread of the
contributing observations is retained, since its mean is the cross-view
inconsistency measure reported by consistency_report. Rendering is a
plain z-buffered splat (nearest point per pixel).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, backproject_many, project_many, MIN_DEPTH
from .errors import MissingDepthError
from .scene import SceneBundle

PSNR_CAP_DB = 99.0


@dataclass
class ColoredPointSet:
    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) float64 in [0, 1]
    confidences: np.ndarray  # (N,) float64
    obs_counts: np.ndarray  # (N,) int64, observations fused into each point
    color_variances: np.ndarray  # (N,) mean-over-channels variance of contributors
    cell_size: float

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class ConsistencyReport:
    per_view_psnr: dict[int, float]
    cross_view_color_variance: float
    coverage: float


def _median_nn_spacing(points: np.ndarray, sample: int = 20000, seed: int = 0) -> float:
    n = points.shape[0]
    if n < 2:
        return 1.0
    if n > sample:
        idx = np.random.default_rng(seed).choice(n, size=sample, replace=False)
        query = points[idx]
    else:
        query = points
    tree = cKDTree(points)
    dist, _ = tree.query(query, k=2)
    spacing = float(np.median(dist[:, 1]))
    return spacing if spacing > 0 else 1.0


def bake(
    bundle: SceneBundle,
    edited_views: dict[int, np.ndarray],
    confidence_maps: dict[int, np.ndarray] | None = None,
    cell_size: float | None = None,
) -> ColoredPointSet:
    """Fuse edited view colors into a voxelized point set.

    edited_views maps view id to a (3, H, W) image. Confidence defaults to
    1 per pixel; the pipeline passes the correspondence weight mass. Cell
    size defaults to the median nearest-neighbor spacing of the
    backprojected points.

    Raises:
        MissingDepthError: a contributing view has no depth map.
    """
    positions = []
    colors = []
    confs = []
    for vid in sorted(edited_views):
        view = bundle.view(vid)
        if view.depth is None:
            raise MissingDepthError(f"view {vid} has no depth map")
        sel = view.depth.valid
        if view.fore_mask is not None:
            sel = sel & view.fore_mask
        ys, xs = np.nonzero(sel)
        if ys.size == 0:
            continue
        uv = np.stack([xs.astype(np.float64), ys.astype(np.float64)], axis=1)
        pts = backproject_many(view.camera, uv, view.depth.values[ys, xs])
        image = np.asarray(edited_views[vid], dtype=np.float64)
        positions.append(pts)
        colors.append(image[:, ys, xs].T)
        if confidence_maps is not None and vid in confidence_maps:
            confs.append(np.asarray(confidence_maps[vid], dtype=np.float64)[ys, xs])
        else:
            confs.append(np.ones(ys.size))

    if not positions:
        return ColoredPointSet(
            positions=np.empty((0, 3)),
            colors=np.empty((0, 3)),
            confidences=np.empty(0),
            obs_counts=np.empty(0, dtype=np.int64),
            color_variances=np.empty(0),
            cell_size=1.0,
        )

    pos = np.concatenate(positions)
    col = np.concatenate(colors)
    conf = np.maximum(np.concatenate(confs), 1e-12)

    if cell_size is None:
        cell_size = _median_nn_spacing(pos)

    keys = np.floor(pos / cell_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n_cells = counts.size

    wsum = np.bincount(inverse, weights=conf, minlength=n_cells)
    fused_pos = np.stack(
        [np.bincount(inverse, weights=conf * pos[:, i], minlength=n_cells) / wsum for i in range(3)],
        axis=1,
    )
    fused_col = np.stack(
        [np.bincount(inverse, weights=conf * col[:, i], minlength=n_cells) / wsum for i in range(3)],
        axis=1,
    )
    # Unweighted per-cell color variance of the contributing observations.
    mean_col = np.stack(
        [np.bincount(inverse, weights=col[:, i], minlength=n_cells) / counts for i in range(3)],
        axis=1,
    )
    sq = np.stack(
        [np.bincount(inverse, weights=col[:, i] ** 2, minlength=n_cells) / counts for i in range(3)],
        axis=1,
    )
    var = np.maximum(sq - mean_col**2, 0.0).mean(axis=1)

    return ColoredPointSet(
        positions=fused_pos,
        colors=np.clip(fused_col, 0.0, 1.0),
        confidences=wsum,
        obs_counts=counts.astype(np.int64),
        color_variances=var,
        cell_size=float(cell_size),
    )


def render(point_set: ColoredPointSet, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered splat of the point set into a camera.

    Returns (image (3, H, W) float32, coverage (H, W) bool). An empty point
    set renders zero coverage.
    """
    h, w = camera.height, camera.width
    image = np.zeros((3, h, w), dtype=np.float32)
    coverage = np.zeros((h, w), dtype=bool)
    if len(point_set) == 0:
        return image, coverage
    uv, z = project_many(camera, point_set.positions)
    ok = z > MIN_DEPTH
    with np.errstate(invalid="ignore"):
        xs = np.floor(uv[:, 0] + 0.5).astype(np.int64)
        ys = np.floor(uv[:, 1] + 0.5).astype(np.int64)
        ok &= (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return image, coverage
    flat = ys[idx] * w + xs[idx]
    order = np.lexsort((z[idx], flat))
    flat = flat[order]
    idx = idx[order]
    first = np.ones(flat.shape, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    flat = flat[first]
    idx = idx[first]
    image.reshape(3, -1)[:, flat] = point_set.colors[idx].T.astype(np.float32)
    coverage.reshape(-1)[flat] = True
    return image, coverage


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """PSNR in dB over masked pixels, capped at PSNR_CAP_DB for exact match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        diff = (a - b)[:, mask]
    else:
        diff = a - b
    if diff.size == 0:
        return PSNR_CAP_DB
    mse = float(np.mean(diff**2))
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def consistency_report(
    edited_views: dict[int, np.ndarray],
    point_set: ColoredPointSet,
    cameras: dict[int, Camera],
    fore_masks: dict[int, np.ndarray] | None = None,
) -> ConsistencyReport:
    """Cross-view agreement metrics for a baked point set.

    Per view: PSNR between the edited image and the point-set re-render
    over covered pixels. Cross-view color variance is the mean per-point
    variance of contributing observations over points with at least two
    observations. Coverage is the covered fraction of the (foreground)
    pixels; with zero coverage no PSNRs are reported.
    """
    per_view: dict[int, float] = {}
    covered = 0
    total = 0
    for vid in sorted(edited_views):
        cam = cameras[vid]
        rendered, cov = render(point_set, cam)
        domain = np.ones(cov.shape, dtype=bool)
        if fore_masks is not None and fore_masks.get(vid) is not None:
            domain = np.asarray(fore_masks[vid], dtype=bool)
        covered += int((cov & domain).sum())
        total += int(domain.sum())
        if (cov & domain).any():
            per_view[vid] = psnr(edited_views[vid], rendered, cov & domain)

    multi = point_set.obs_counts >= 2
    variance = float(point_set.color_variances[multi].mean()) if multi.any() else 0.0
    coverage = covered / total if total else 0.0
    return ConsistencyReport(
        per_view_psnr=per_view,
        cross_view_color_variance=variance,
        coverage=coverage,
    )


def ply_text(point_set: ColoredPointSet) -> str:
    """ASCII PLY with positions, 8-bit colors and confidence."""
    n = len(point_set)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float confidence",
        "end_header",
    ]
    rgb = np.clip(np.floor(point_set.colors * 255.0 + 0.5), 0, 255).astype(int)
    for i in range(n):
        p = point_set.positions[i]
        lines.append(
            f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]} "
            f"{point_set.confidences[i]:.8g}"
        )
    return "\n".join(lines) + "\n"


def write_ply(point_set: ColoredPointSet, path: str | Path) -> None:
    Path(path).write_text(ply_text(point_set))
