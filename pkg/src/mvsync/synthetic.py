"""Synthetic scenes with exact depth, masks and correspondence ground truth.

Three scene kinds on a camera orbit:

    plane       one infinite textured plane, foreground square offset from
                the orbit target so coverage shrinks as the baseline grows
    two_planes  an infinite back plane plus a floating front rectangle that
                occludes different back regions per view
    cube        a floating textured box; background pixels carry no depth

Each view gets an analytically rendered image, a float64 depth map and a
foreground mask. When out_dir is given, the scene is also written to disk in
the loader's directory convention (COLMAP text files, PNGs, PFM depth) along
with oracle.npz, a per-view-pair ground-truth table computed by direct ray
casting: visibility, expected target pixels and expected reprojected depth.
The oracle math is kept to raw matrix arithmetic on purpose so it checks the
geometry pipeline from the outside.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, DepthMap, PixelCoord
from .scene import (
    Keypoint3D,
    PipelineConfig,
    SceneBundle,
    ViewRecord,
    save_depth,
    save_image_png,
    save_mask_png,
)

_EPS = 1e-12
_BACKGROUND = np.array([0.24, 0.24, 0.28])


@dataclass
class _Plane:
    z: float


@dataclass
class _Rect:
    z: float
    cx: float
    cy: float
    hx: float
    hy: float


@dataclass
class _Box:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)


@dataclass
class _SceneSpec:
    kind: str
    surfaces: list
    target: np.ndarray
    orbit_radius: float
    orbit_height: float
    arc_degrees: float
    fore_fn: object  # (points (N,3), surf_id (N,)) -> bool mask
    focal_mult: float = 1.0  # focal length as a multiple of the resolution


def _texture(points: np.ndarray) -> np.ndarray:
    """Smooth band-limited RGB field over world coordinates."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r = 0.5 + 0.33 * np.sin(1.1 * x + 0.7 * y + 0.9 * z)
    g = 0.5 + 0.33 * np.sin(0.6 * x - 1.2 * y + 0.8 * z + 2.0)
    b = 0.5 + 0.33 * np.cos(0.9 * x + 0.5 * y - 0.7 * z + 1.0)
    return np.stack([r, g, b], axis=1)


def _raycast(surfaces: list, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit ray casting; dirs need not be normalized.

    Returns (s, surf_id) where s is the ray parameter of the nearest hit
    (inf when nothing is hit) and surf_id indexes surfaces (-1 for miss).
    """
    n = dirs.shape[0]
    best_s = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    for sid, surf in enumerate(surfaces):
        if isinstance(surf, _Plane):
            dz = dirs[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (surf.z - origin[2]) / dz
            hit = np.isfinite(s) & (s > _EPS)
        elif isinstance(surf, _Rect):
            dz = dirs[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (surf.z - origin[2]) / dz
            px = origin[0] + s * dirs[:, 0]
            py = origin[1] + s * dirs[:, 1]
            hit = (
                np.isfinite(s)
                & (s > _EPS)
                & (np.abs(px - surf.cx) <= surf.hx)
                & (np.abs(py - surf.cy) <= surf.hy)
            )
        elif isinstance(surf, _Box):
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t1 = (surf.lo[None, :] - origin[None, :]) * inv
                t2 = (surf.hi[None, :] - origin[None, :]) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            s = tmin
            hit = np.isfinite(s) & (tmax >= tmin) & (s > _EPS)
        else:  # pragma: no cover
            raise TypeError(f"unknown surface {surf!r}")
        s = np.where(hit, s, np.inf)
        better = s < best_s
        best_s = np.where(better, s, best_s)
        best_id = np.where(better, sid, best_id)
    return best_s, best_id


def _look_at(center: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(float(forward @ helper)) > 0.999:
        helper = np.array([1.0, 0.0, 0.0])
    x_cam = np.cross(helper, forward)
    x_cam = x_cam / np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)
    rotation = np.stack([x_cam, y_cam, forward], axis=0)
    translation = -rotation @ center
    return rotation, translation


def _scene_spec(kind: str) -> _SceneSpec:
    if kind == "plane":
        # Oblique narrow-FOV orbit: frame footprints on the plane are
        # elongated quads that scissor apart, so cross-view overlap (and the
        # match count) shrinks monotonically with baseline angle.
        def fore(points, surf_id):
            return (np.abs(points[:, 0]) <= 4.0) & (np.abs(points[:, 1]) <= 4.0)

        return _SceneSpec(
            kind=kind,
            surfaces=[_Plane(z=0.0)],
            target=np.array([0.0, 0.0, 0.0]),
            orbit_radius=2.5,
            orbit_height=2.5,
            arc_degrees=110.0,
            fore_fn=fore,
            focal_mult=2.0,
        )
    if kind == "two_planes":
        def fore(points, surf_id):
            return (np.abs(points[:, 0]) <= 1.0) & (np.abs(points[:, 1]) <= 1.0)

        return _SceneSpec(
            kind=kind,
            surfaces=[_Plane(z=0.0), _Rect(z=0.9, cx=0.0, cy=0.0, hx=0.45, hy=0.45)],
            target=np.array([0.0, 0.0, 0.3]),
            orbit_radius=1.8,
            orbit_height=3.0,
            arc_degrees=140.0,
            fore_fn=fore,
        )
    if kind == "cube":
        def fore(points, surf_id):
            return surf_id >= 0

        # A 150 degree arc keeps strong pairwise overlap (so anchor
        # propagation has coverage) while still rotating side faces in and
        # out of visibility for the self-occlusion oracle.
        half = 0.5
        center = np.array([0.0, 0.0, 0.55])
        return _SceneSpec(
            kind=kind,
            surfaces=[_Box(lo=center - half, hi=center + half)],
            target=center,
            orbit_radius=2.3,
            orbit_height=2.6,
            arc_degrees=150.0,
            fore_fn=fore,
        )
    raise ValueError(f"unknown scene kind {kind!r}; expected plane, two_planes or cube")


# The world z-distance between the two planes of the two_planes scene;
# occlusion tests set tau_d to half of it.
TWO_PLANES_GAP = 0.9


def _pixel_dirs_world(camera: Camera) -> np.ndarray:
    """Unnormalized world ray directions through every pixel center.

    The ray parameter of C + s*dir equals camera-space depth because the
    camera-space direction has unit z.
    """
    w, h = camera.width, camera.height
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dir_cam = np.stack(
        [(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy, np.ones_like(us)],
        axis=-1,
    ).reshape(-1, 3)
    return dir_cam @ camera.rotation  # == (R^T @ dir_cam^T)^T


def _orbit_cameras(spec: _SceneSpec, n_views: int, resolution: int) -> list[Camera]:
    focal = spec.focal_mult * float(resolution)
    c = (resolution - 1) / 2.0
    cams = []
    if spec.arc_degrees >= 360.0:
        thetas = np.linspace(0.0, 2 * np.pi, n_views, endpoint=False)
    else:
        thetas = np.deg2rad(np.linspace(0.0, spec.arc_degrees, n_views))
    for theta in thetas:
        center = np.array(
            [
                spec.orbit_radius * np.cos(theta),
                spec.orbit_radius * np.sin(theta),
                spec.orbit_height,
            ]
        )
        rotation, translation = _look_at(center, spec.target)
        cams.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=c,
                cy=c,
                width=resolution,
                height=resolution,
                rotation=rotation,
                translation=translation,
            )
        )
    return cams


def _render_view(spec: _SceneSpec, camera: Camera) -> tuple[np.ndarray, DepthMap, np.ndarray, np.ndarray, np.ndarray]:
    """Render one view; returns (image, depth, fore_mask, points, surf_id)."""
    w, h = camera.width, camera.height
    dirs = _pixel_dirs_world(camera)
    origin = camera.center
    s, surf_id = _raycast(spec.surfaces, origin, dirs)
    hit = np.isfinite(s)
    points = origin[None, :] + np.where(hit, s, 0.0)[:, None] * dirs

    colors = np.where(hit[:, None], _texture(points), _BACKGROUND[None, :])
    image = colors.T.reshape(3, h, w).astype(np.float32)

    depth_values = np.where(hit, s, 0.0).reshape(h, w)
    depth = DepthMap(values=depth_values, valid=hit.reshape(h, w))

    fore = (spec.fore_fn(points, surf_id) & hit).reshape(h, w)
    return image, depth, fore, points, surf_id


def _build_oracle(spec: _SceneSpec, cameras: list[Camera], view_points: list[np.ndarray], view_hit: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Ground-truth pair table by direct ray casting (raw matrix math)."""
    n = len(cameras)
    h = cameras[0].height
    w = cameras[0].width
    visible = np.zeros((n, n, h, w), dtype=bool)
    occluded = np.zeros((n, n, h, w), dtype=bool)
    target_uv = np.full((n, n, h, w, 2), np.nan)
    target_depth = np.full((n, n, h, w), np.nan)

    for a in range(n):
        pts = view_points[a]
        has_geom = view_hit[a]
        for b in range(n):
            if b == a:
                continue
            cam = cameras[b]
            pc = pts @ cam.rotation.T + cam.translation
            z = pc[:, 2]
            front = has_geom & (z > _EPS)
            with np.errstate(divide="ignore", invalid="ignore"):
                u = cam.fx * pc[:, 0] / z + cam.cx
                v = cam.fy * pc[:, 1] / z + cam.cy
            in_frame = front & (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)

            # Nearest surface along b's ray toward each point.
            origin = cam.center
            rays = pts - origin[None, :]
            s_hit, _ = _raycast(spec.surfaces, origin, rays)
            # The candidate point sits at ray parameter 1 by construction.
            same_point = np.abs(s_hit - 1.0) < 1e-9
            blocked = s_hit < 1.0 - 1e-9

            vis = in_frame & same_point
            occ = front & blocked
            visible[a, b] = vis.reshape(h, w)
            occluded[a, b] = occ.reshape(h, w)
            tu = np.where(vis, u, np.nan)
            tv = np.where(vis, v, np.nan)
            target_uv[a, b, :, :, 0] = tu.reshape(h, w)
            target_uv[a, b, :, :, 1] = tv.reshape(h, w)
            target_depth[a, b] = np.where(vis, z, np.nan).reshape(h, w)

    return {
        "visible": visible,
        "occluded": occluded,
        "target_uv": target_uv,
        "target_depth": target_depth,
    }


def _keypoints(spec: _SceneSpec, cameras: list[Camera], view_ids: list[int], resolution: int, stride: int) -> list[Keypoint3D]:
    """Surface keypoints on a world grid, observed wherever z-buffer visible."""
    pts = []
    if spec.kind == "plane":
        # Sample the first view's pixel grid so keypoints cover the actual
        # footprint of the narrow-FOV orbit.
        cam = cameras[0]
        grid = np.arange(stride // 2, resolution, stride, dtype=np.float64)
        us, vs = np.meshgrid(grid, grid)
        dir_cam = np.stack(
            [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1
        ).reshape(-1, 3)
        dirs = dir_cam @ cam.rotation
        origin = cam.center
        s = -origin[2] / dirs[:, 2]
        pts = origin[None, :] + s[:, None] * dirs
        pts[:, 2] = 0.0
    elif spec.kind == "two_planes":
        n_side = max(2, int(round(resolution * 0.5 / stride)))
        xs = np.linspace(-0.95, 0.95, n_side)
        gx, gy = np.meshgrid(xs, xs)
        back = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        xs_f = np.linspace(-0.4, 0.4, max(2, n_side // 2))
        fx, fy = np.meshgrid(xs_f, xs_f)
        front = np.stack([fx.ravel(), fy.ravel(), np.full(fx.size, 0.9)], axis=1)
        pts = np.concatenate([back, front], axis=0)
    else:  # cube
        box = spec.surfaces[0]
        n_side = max(2, int(round(resolution * 0.3 / stride)))
        lin = np.linspace(0.02, 0.98, n_side)
        gu, gv = np.meshgrid(lin, lin)
        gu, gv = gu.ravel(), gv.ravel()
        faces = []
        span = box.hi - box.lo
        for axis in range(3):
            for side in (0, 1):
                p = np.empty((gu.size, 3))
                p[:, axis] = box.hi[axis] if side else box.lo[axis]
                others = [a for a in range(3) if a != axis]
                p[:, others[0]] = box.lo[others[0]] + gu * span[others[0]]
                p[:, others[1]] = box.lo[others[1]] + gv * span[others[1]]
                faces.append(p)
        pts = np.concatenate(faces, axis=0)

    keypoints: list[Keypoint3D] = []
    w = h = resolution
    for pos in pts:
        obs: list[tuple[int, PixelCoord]] = []
        for cam, vid in zip(cameras, view_ids):
            origin = cam.center
            ray = pos - origin
            s_hit, _ = _raycast(spec.surfaces, origin, ray[None, :])
            if not np.isfinite(s_hit[0]) or abs(s_hit[0] - 1.0) > 1e-9:
                continue
            pc = cam.rotation @ pos + cam.translation
            if pc[2] <= _EPS:
                continue
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            if 0.0 <= u <= w - 1.0 and 0.0 <= v <= h - 1.0:
                obs.append((vid, PixelCoord(float(u), float(v))))
        if obs:
            keypoints.append(Keypoint3D(position=pos, observing_views=obs))
    return keypoints


def gen_synthetic_scene(
    kind: str,
    n_views: int,
    resolution: int,
    out_dir: str | Path | None = None,
    *,
    keypoint_stride: int = 8,
    config: PipelineConfig | None = None,
) -> SceneBundle:
    """Generate a synthetic posed scene with exact depth and ground truth.

    Returns the in-memory bundle (float64 depth, float32 images). With
    out_dir set, also writes the on-disk scene (COLMAP text files, PNG
    images/masks, PFM depth at float32), oracle.npz and a ready-to-run
    scene.cfg.

    Raises:
        ValueError: fewer than 2 views or unknown kind.
    """
    if n_views < 2:
        raise ValueError(f"n_views must be >= 2, got {n_views}")
    spec = _scene_spec(kind)
    cameras = _orbit_cameras(spec, n_views, resolution)
    view_ids = list(range(1, n_views + 1))

    views: list[ViewRecord] = []
    view_points: list[np.ndarray] = []
    view_hit: list[np.ndarray] = []
    for cam, vid in zip(cameras, view_ids):
        image, depth, fore, points, _ = _render_view(spec, cam)
        views.append(
            ViewRecord(
                id=vid,
                camera=cam,
                image=image,
                depth=depth,
                fore_mask=fore,
                name=f"view_{vid:03d}.png",
            )
        )
        view_points.append(points)
        view_hit.append(depth.valid.reshape(-1))

    keypoints = _keypoints(spec, cameras, view_ids, resolution, keypoint_stride)
    bundle = SceneBundle(views=views, points3d=keypoints, config=config or PipelineConfig())

    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "depth").mkdir(exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
        _write_colmap_files(out, bundle)
        for view in views:
            stem = Path(view.name).stem
            save_image_png(out / "images" / view.name, view.image)
            save_depth(out / "depth" / f"{stem}.pfm", view.depth)
            save_mask_png(out / "masks" / f"{stem}.png", view.fore_mask)
        oracle = _build_oracle(spec, cameras, view_points, view_hit)
        oracle["view_ids"] = np.asarray(view_ids, dtype=np.int64)
        np.savez_compressed(out / "oracle.npz", **oracle)
        _write_scene_config(out, kind)
    return bundle


def _write_colmap_files(out: Path, bundle: SceneBundle) -> None:
    from .scene import rotation_to_quaternion  # local import to avoid cycle noise

    cam0 = bundle.views[0].camera
    with open(out / "cameras.txt", "w") as f:
        f.write("# Camera list with one line of data per camera:\n")
        f.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        f.write(
            f"1 PINHOLE {cam0.width} {cam0.height} "
            f"{cam0.fx:.17g} {cam0.fy:.17g} {cam0.cx:.17g} {cam0.cy:.17g}\n"
        )

    # Index observations per view for images.txt, tracks for points3D.txt.
    obs_per_view: dict[int, list[tuple[float, float, int]]] = {v.id: [] for v in bundle.views}
    tracks: dict[int, list[tuple[int, int]]] = {}
    for pid, kp in enumerate(bundle.points3d, start=1):
        tracks[pid] = []
        for view_id, pix in kp.observing_views:
            idx = len(obs_per_view[view_id])
            obs_per_view[view_id].append((pix.u, pix.v, pid))
            tracks[pid].append((view_id, idx))

    with open(out / "images.txt", "w") as f:
        f.write("# Image list with two lines of data per image:\n")
        f.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for view in bundle.views:
            q = rotation_to_quaternion(view.camera.rotation)
            t = view.camera.translation
            f.write(
                f"{view.id} {q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} "
                f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} 1 {view.name}\n"
            )
            f.write(" ".join(f"{u:.17g} {v:.17g} {pid}" for u, v, pid in obs_per_view[view.id]) + "\n")

    with open(out / "points3D.txt", "w") as f:
        f.write("# 3D point list with one line of data per point:\n")
        f.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid, kp in enumerate(bundle.points3d, start=1):
            color = np.clip(_texture(kp.position[None, :])[0] * 255.0, 0, 255).astype(int)
            track = " ".join(f"{img} {idx}" for img, idx in tracks[pid])
            f.write(
                f"{pid} {kp.position[0]:.17g} {kp.position[1]:.17g} {kp.position[2]:.17g} "
                f"{color[0]} {color[1]} {color[2]} 0.0 {track}\n"
            )


def _write_scene_config(out: Path, kind: str) -> None:
    text = "\n".join(
        [
            f"# generated synthetic scene ({kind})",
            f"scene.root = {out.resolve()}",
            "edit.prompt = shift the hue of the subject",
            "predictor.builtin = synthetic",
            "latent.downscale = 1",
            "latent.channels = 3",
            "guidance.g_I = 1.0",
            "guidance.g_T = 1.0",
            "schedule.steps = 8",
            "seed = 7",
            f"output.dir = {(out / 'run').resolve()}",
            "",
        ]
    )
    (out / "scene.cfg").write_text(text)
