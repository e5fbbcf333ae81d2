"""Scene ingestion and artifact persistence.

Reads COLMAP-style text reconstructions (cameras.txt / images.txt /
points3D.txt), per-view depth maps (PFM or raw float32), 8-bit PNG images
and masks, and writes pipeline outputs with a hash manifest.

Directory convention for a scene root:
    cameras.txt, images.txt, points3D.txt
    images/<name>.png      required, referenced by images.txt NAME column
    depth/<stem>.pfm|.raw  optional
    masks/<stem>.png       optional

Only PINHOLE and SIMPLE_PINHOLE camera models are accepted; the pipeline
assumes calibrated, undistorted inputs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, DepthMap, PixelCoord
from .errors import (
    ConfigError,
    FormatError,
    MissingCameraError,
    ParseError,
    SizeMismatchError,
    UnknownViewError,
    UnsupportedModelError,
)

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")

# Aligning the last decoder layer replaces the block that directly produces
# the noise output, which corrupts the prediction; it is never accepted.
FORBIDDEN_ALIGN_LAYER = 11


@dataclass
class PipelineConfig:
    """Numeric knobs of the consistency engine.

    tau_d of None means "auto": resolved to 1% of the scene depth range when
    graphs are built.
    """

    tau_d: float | None = None
    tau_p: float = 2.0
    mu: float = 50.0
    g_image: float = 1.5
    g_text: float = 7.5
    decay_radius: float = 20.0
    group_size: int = 10
    overlap_threshold: float = 0.8
    latent_downscale: int = 8
    latent_channels: int = 4
    aligned_layers: tuple[int, ...] = (5, 8)

    def __post_init__(self):
        if self.tau_d is not None and self.tau_d <= 0:
            raise ConfigError(f"tau_d must be positive, got {self.tau_d}")
        if self.tau_p <= 0:
            raise ConfigError(f"tau_p must be positive, got {self.tau_p}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.decay_radius <= 0:
            raise ConfigError(f"decay_radius must be positive, got {self.decay_radius}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 0 < self.overlap_threshold <= 1:
            raise ConfigError(f"overlap_threshold must be in (0, 1], got {self.overlap_threshold}")
        if self.latent_downscale < 1:
            raise ConfigError(f"latent_downscale must be >= 1, got {self.latent_downscale}")
        self.aligned_layers = tuple(int(l) for l in self.aligned_layers)
        for layer in self.aligned_layers:
            if not 1 <= layer <= 11:
                raise ConfigError(f"aligned layer {layer} outside the valid range 1..11")
            if layer == FORBIDDEN_ALIGN_LAYER:
                raise ConfigError(
                    "aligned layer 11 is rejected: it is the final decoder block, and "
                    "overwriting its output corrupts the predicted noise; use layers 1-10"
                )


@dataclass
class ViewRecord:
    """One posed view: camera, image, optional depth and foreground mask."""

    id: int
    camera: Camera
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    depth: DepthMap | None = None
    fore_mask: np.ndarray | None = None  # (H, W) bool
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"view image must be (3, H, W), got {self.image.shape}")
        h, w = self.image.shape[1:]
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError(
                f"view {self.id}: image {w}x{h} does not match camera {self.camera.width}x{self.camera.height}"
            )
        if self.depth is not None and (self.depth.height, self.depth.width) != (h, w):
            raise ValueError(f"view {self.id}: depth map shape does not match image")
        if self.fore_mask is not None:
            self.fore_mask = np.asarray(self.fore_mask, dtype=bool)
            if self.fore_mask.shape != (h, w):
                raise ValueError(f"view {self.id}: fore_mask shape does not match image")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[1]


@dataclass
class Keypoint3D:
    """Sparse reconstruction point with its observing views."""

    position: np.ndarray  # (3,)
    observing_views: list[tuple[int, PixelCoord]] = field(default_factory=list)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


@dataclass
class SceneBundle:
    """Immutable multi-view scene: views, sparse points, shared config."""

    views: list[ViewRecord]
    points3d: list[Keypoint3D]
    config: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("view ids must be unique")
        sizes = {v.size for v in self.views}
        if len(sizes) > 1:
            raise ValueError(f"all views must share image dimensions, got {sizes}")
        known = set(ids)
        for kp in self.points3d:
            if not kp.observing_views:
                raise ValueError("keypoints must carry at least one observation")
            for view_id, pix in kp.observing_views:
                if view_id not in known:
                    raise ValueError(f"keypoint observes unknown view {view_id}")
                view = self.view(view_id)
                w, h = view.size
                if not (-0.5 <= pix[0] < w - 0.5 and -0.5 <= pix[1] < h - 0.5):
                    raise ValueError(f"keypoint observation {pix} outside view {view_id} bounds")

    def view(self, view_id: int) -> ViewRecord:
        for v in self.views:
            if v.id == view_id:
                return v
        raise UnknownViewError(f"view {view_id} not in bundle")

    def view_ids(self) -> list[int]:
        return [v.id for v in self.views]

    def depth_range(self) -> tuple[float, float]:
        lo, hi = np.inf, -np.inf
        for v in self.views:
            if v.depth is None or not v.depth.valid.any():
                continue
            vals = v.depth.values[v.depth.valid]
            lo = min(lo, float(vals.min()))
            hi = max(hi, float(vals.max()))
        if not np.isfinite(lo):
            raise ValueError("no valid depth anywhere in the bundle")
        return lo, hi


# ---------------------------------------------------------------------------
# COLMAP text parsing


def _data_lines(path: Path):
    """Yield (line_no, stripped_line) skipping comments and blank lines."""
    with open(path, "r") as f:
        for i, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield i, line


def quaternion_to_rotation(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized first."""
    q = np.array([qw, qx, qy, qz], dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Inverse of quaternion_to_rotation; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    w = np.sqrt(max(0.0, 1.0 + m[0, 0] + m[1, 1] + m[2, 2])) / 2.0
    if w > 1e-8:
        x = (m[2, 1] - m[1, 2]) / (4 * w)
        y = (m[0, 2] - m[2, 0]) / (4 * w)
        z = (m[1, 0] - m[0, 1]) / (4 * w)
    else:
        # w near zero: pick the dominant diagonal axis
        d = np.diag(m)
        k = int(np.argmax(d))
        if k == 0:
            x = np.sqrt(max(0.0, 1 + m[0, 0] - m[1, 1] - m[2, 2])) / 2
            y = (m[0, 1] + m[1, 0]) / (4 * x)
            z = (m[0, 2] + m[2, 0]) / (4 * x)
            w = (m[2, 1] - m[1, 2]) / (4 * x)
        elif k == 1:
            y = np.sqrt(max(0.0, 1 - m[0, 0] + m[1, 1] - m[2, 2])) / 2
            x = (m[0, 1] + m[1, 0]) / (4 * y)
            z = (m[1, 2] + m[2, 1]) / (4 * y)
            w = (m[0, 2] - m[2, 0]) / (4 * y)
        else:
            z = np.sqrt(max(0.0, 1 - m[0, 0] - m[1, 1] + m[2, 2])) / 2
            x = (m[0, 2] + m[2, 0]) / (4 * z)
            y = (m[1, 2] + m[2, 1]) / (4 * z)
            w = (m[1, 0] - m[0, 1]) / (4 * z)
    q = np.array([w, x, y, z], dtype=np.float64)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass
class CameraIntrinsics:
    camera_id: int
    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float


def parse_cameras_text(path: str | Path) -> dict[int, CameraIntrinsics]:
    """Parse cameras.txt: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]."""
    path = Path(path)
    cameras: dict[int, CameraIntrinsics] = {}
    for line_no, line in _data_lines(path):
        parts = line.split()
        try:
            camera_id = int(parts[0])
            model = parts[1]
            width = int(parts[2])
            height = int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (IndexError, ValueError) as e:
            raise ParseError(path, line_no, f"malformed camera line: {e}") from e
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(path, line_no, f"PINHOLE expects 4 params, got {len(params)}")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(path, line_no, f"SIMPLE_PINHOLE expects 3 params, got {len(params)}")
            f, cx, cy = params
            fx = fy = f
        else:
            raise UnsupportedModelError(f"{path}:{line_no}: camera model {model!r} not supported")
        cameras[camera_id] = CameraIntrinsics(camera_id, model, width, height, fx, fy, cx, cy)
    return cameras


@dataclass
class ImagePose:
    image_id: int
    qvec: np.ndarray  # (4,) w, x, y, z
    tvec: np.ndarray  # (3,)
    camera_id: int
    name: str
    points2d: list[tuple[float, float, int]]  # (x, y, point3d_id), id -1 for none


def parse_images_text(path: str | Path) -> list[ImagePose]:
    """Parse images.txt (two lines per image: pose, then 2-D observations).

    The observation line may be empty (an image with no tracked points).
    """
    path = Path(path)
    images: list[ImagePose] = []
    pending: ImagePose | None = None
    with open(path, "r") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if pending is None:
                if not line:
                    continue
                parts = line.split()
                if len(parts) < 10:
                    raise ParseError(path, line_no, f"image pose line needs 10 fields, got {len(parts)}")
                try:
                    image_id = int(parts[0])
                    qvec = np.array([float(p) for p in parts[1:5]])
                    tvec = np.array([float(p) for p in parts[5:8]])
                    camera_id = int(parts[8])
                except ValueError as e:
                    raise ParseError(path, line_no, f"malformed pose line: {e}") from e
                pending = ImagePose(image_id, qvec, tvec, camera_id, parts[9], [])
            else:
                parts = line.split()
                if len(parts) % 3 != 0:
                    raise ParseError(path, line_no, "observation line length must be a multiple of 3")
                try:
                    pending.points2d = [
                        (float(parts[i]), float(parts[i + 1]), int(parts[i + 2]))
                        for i in range(0, len(parts), 3)
                    ]
                except ValueError as e:
                    raise ParseError(path, line_no, f"malformed observation line: {e}") from e
                images.append(pending)
                pending = None
    if pending is not None:
        images.append(pending)
    return images


@dataclass
class PointRecord:
    point_id: int
    xyz: np.ndarray
    track: list[tuple[int, int]]  # (image_id, point2d_idx)


def parse_points_text(path: str | Path) -> list[PointRecord]:
    """Parse points3D.txt: POINT3D_ID X Y Z R G B ERROR TRACK[]."""
    path = Path(path)
    points: list[PointRecord] = []
    for line_no, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 8:
            raise ParseError(path, line_no, f"point line needs at least 8 fields, got {len(parts)}")
        try:
            point_id = int(parts[0])
            xyz = np.array([float(p) for p in parts[1:4]])
            track_parts = parts[8:]
            if len(track_parts) % 2 != 0:
                raise ParseError(path, line_no, "track must be (image_id, point2d_idx) pairs")
            track = [
                (int(track_parts[i]), int(track_parts[i + 1]))
                for i in range(0, len(track_parts), 2)
            ]
        except ValueError as e:
            raise ParseError(path, line_no, f"malformed point line: {e}") from e
        points.append(PointRecord(point_id, xyz, track))
    return points


# ---------------------------------------------------------------------------
# Raster IO


def load_image(path: str | Path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an 8-bit PNG as (3, H, W) float32 in [0, 1]; bilinear resize."""
    img = Image.open(path).convert("RGB")
    if target_size is not None and img.size != target_size:
        img = img.resize(target_size, Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.moveaxis(arr, -1, 0).copy()


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit PNG."""
    arr = np.moveaxis(np.asarray(image, dtype=np.float64), 0, -1)
    data = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_mask(path: str | Path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an 8-bit mask PNG as (H, W) bool; nearest resize."""
    img = Image.open(path).convert("L")
    if target_size is not None and img.size != target_size:
        img = img.resize(target_size, Image.NEAREST)
    return np.asarray(img) > 127


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(
        path, format="PNG"
    )


def resize_nearest(values: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a 2-D grid. Never blends values, so depth
    maps keep metric meaning at object boundaries."""
    tw, th = target_size
    h, w = values.shape
    ys = np.clip(np.floor((np.arange(th) + 0.5) * (h / th) - 0.5 + 0.5), 0, h - 1).astype(np.int64)
    xs = np.clip(np.floor((np.arange(tw) + 0.5) * (w / tw) - 0.5 + 0.5), 0, w - 1).astype(np.int64)
    return values[np.ix_(ys, xs)]


def load_depth(path: str | Path, width: int, height: int) -> DepthMap:
    """Load a depth map from PFM (grayscale, little-endian) or raw float32.

    Nonpositive and nonfinite values are marked invalid.

    Raises:
        SizeMismatchError: payload does not hold exactly width*height floats.
        FormatError: unparseable PFM header or big-endian PFM.
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] == b"Pf" and len(blob) > 2 and blob[2:3] in (b"\n", b"\r", b" ", b"\t"):
        values = _parse_pfm(path, blob, width, height)
    else:
        expected = width * height * 4
        if len(blob) != expected:
            raise SizeMismatchError(
                f"{path}: raw depth holds {len(blob) // 4} floats, expected {width * height}"
            )
        values = np.frombuffer(blob, dtype="<f4").reshape(height, width)
    return DepthMap.from_values(values.astype(np.float64))


def _parse_pfm(path: Path, blob: bytes, width: int, height: int) -> np.ndarray:
    # Header: "Pf" <w> <h> <scale>, tokens separated by whitespace, then raster.
    pos = 0
    tokens = []
    while len(tokens) < 4 and pos < len(blob):
        end = pos
        while end < len(blob) and blob[end : end + 1] not in (b" ", b"\n", b"\r", b"\t"):
            end += 1
        tokens.append(blob[pos:end])
        pos = end + 1
    if len(tokens) < 4:
        raise FormatError(f"{path}: truncated PFM header")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as e:
        raise FormatError(f"{path}: bad PFM header: {e}") from e
    if scale >= 0:
        raise FormatError(f"{path}: only little-endian PFM (scale < 0) is supported")
    if (w, h) != (width, height):
        raise SizeMismatchError(f"{path}: PFM is {w}x{h}, expected {width}x{height}")
    data = blob[pos:]
    if len(data) < w * h * 4:
        raise SizeMismatchError(f"{path}: PFM raster holds {len(data) // 4} floats, expected {w * h}")
    values = np.frombuffer(data[: w * h * 4], dtype="<f4").reshape(h, w)
    # PFM stores rows bottom-to-top.
    return values[::-1].copy()


def save_depth(path: str | Path, depth: DepthMap, fmt: str = "pfm") -> None:
    """Write a depth map as little-endian PFM or raw float32.

    Invalid pixels are stored as 0.0 (which load_depth marks invalid again).
    Values are stored as float32, so round-trips are bit-exact at float32
    precision.
    """
    path = Path(path)
    values = np.where(depth.valid, depth.values, 0.0).astype("<f4")
    if fmt == "pfm":
        h, w = values.shape
        header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
        path.write_bytes(header + values[::-1].tobytes())
    elif fmt == "raw":
        path.write_bytes(values.tobytes())
    else:
        raise ValueError(f"unknown depth format {fmt!r}")


# ---------------------------------------------------------------------------
# Scene assembly


def _scale_intrinsics(intr: CameraIntrinsics, width: int, height: int) -> CameraIntrinsics:
    if (width, height) == (intr.width, intr.height):
        return intr
    sx = width / intr.width
    sy = height / intr.height
    # Center-based convention: pixel centers map as x' = (x + 0.5) * s - 0.5.
    return CameraIntrinsics(
        intr.camera_id,
        intr.model,
        width,
        height,
        intr.fx * sx,
        intr.fy * sy,
        (intr.cx + 0.5) * sx - 0.5,
        (intr.cy + 0.5) * sy - 0.5,
    )


def load_colmap_scene(
    cameras_path: str | Path,
    images_path: str | Path,
    points_path: str | Path,
    *,
    images_dir: str | Path | None = None,
    depth_dir: str | Path | None = None,
    masks_dir: str | Path | None = None,
    target_size: tuple[int, int] | None = None,
    config: PipelineConfig | None = None,
) -> SceneBundle:
    """Assemble a SceneBundle from COLMAP text files and sibling rasters.

    Directory arguments default to images/, depth/ and masks/ next to
    cameras.txt. Depth and mask files are matched by image-name stem and are
    optional per view. With target_size set, images are resized bilinearly
    and depth/masks with nearest-neighbor; intrinsics are rescaled to match.
    """
    cameras_path = Path(cameras_path)
    root = cameras_path.parent
    images_dir = Path(images_dir) if images_dir is not None else root / "images"
    depth_dir = Path(depth_dir) if depth_dir is not None else root / "depth"
    masks_dir = Path(masks_dir) if masks_dir is not None else root / "masks"

    intrinsics = parse_cameras_text(cameras_path)
    poses = parse_images_text(images_path)
    point_records = parse_points_text(points_path)

    views: list[ViewRecord] = []
    obs_by_point: dict[int, list[tuple[int, PixelCoord]]] = {}
    for pose in sorted(poses, key=lambda p: p.image_id):
        if pose.camera_id not in intrinsics:
            raise MissingCameraError(
                f"image {pose.image_id} ({pose.name}) references unknown camera {pose.camera_id}"
            )
        intr = intrinsics[pose.camera_id]
        native_size = (intr.width, intr.height)
        size = target_size if target_size is not None else native_size
        intr = _scale_intrinsics(intr, *size)
        rotation = quaternion_to_rotation(*pose.qvec)
        camera = Camera(
            fx=intr.fx,
            fy=intr.fy,
            cx=intr.cx,
            cy=intr.cy,
            width=size[0],
            height=size[1],
            rotation=rotation,
            translation=pose.tvec,
        )

        image = load_image(images_dir / pose.name, target_size=size)
        stem = Path(pose.name).stem
        depth = None
        for ext in (".pfm", ".raw"):
            candidate = depth_dir / (stem + ext)
            if candidate.exists():
                depth = load_depth(candidate, *native_size)
                if size != native_size:
                    depth = DepthMap.from_values(resize_nearest(depth.values, size))
                break
        mask = None
        mask_path = masks_dir / (stem + ".png")
        if mask_path.exists():
            mask = load_mask(mask_path, target_size=size)

        views.append(
            ViewRecord(id=pose.image_id, camera=camera, image=image, depth=depth, fore_mask=mask, name=pose.name)
        )

        sx = size[0] / native_size[0]
        sy = size[1] / native_size[1]
        for x, y, pid in pose.points2d:
            if pid < 0:
                continue
            px = (x + 0.5) * sx - 0.5
            py = (y + 0.5) * sy - 0.5
            obs_by_point.setdefault(pid, []).append((pose.image_id, PixelCoord(px, py)))

    # Points never observed in images.txt carry no usable supervision.
    points3d = [
        Keypoint3D(position=rec.xyz, observing_views=obs_by_point[rec.point_id])
        for rec in sorted(point_records, key=lambda r: r.point_id)
        if rec.point_id in obs_by_point
    ]

    return SceneBundle(views=views, points3d=points3d, config=config or PipelineConfig())


# ---------------------------------------------------------------------------
# Artifact persistence


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_artifacts(
    bundle: SceneBundle,
    out_dir: str | Path,
    *,
    images: dict[int, np.ndarray] | None = None,
    stats_text: str | None = None,
    extra_files: dict[str, bytes] | None = None,
) -> list[tuple[str, str]]:
    """Write edited images, correspondence stats and a sha256 manifest.

    images defaults to the bundle's own view images. The manifest is a
    deterministic, line-oriented "path<TAB>sha256" file (manifest.tsv) that
    lists every emitted file, sorted by path; the manifest itself is not
    listed. Returns the manifest entries.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_dir = out_dir / "images"
    image_dir.mkdir(exist_ok=True)

    if images is None:
        images = {v.id: v.image for v in bundle.views}

    written: list[Path] = []
    for view_id in sorted(images):
        path = image_dir / f"view_{view_id:04d}.png"
        save_image_png(path, images[view_id])
        written.append(path)

    if stats_text is not None:
        path = out_dir / "correspondence_stats.txt"
        path.write_text(stats_text)
        written.append(path)

    for rel, blob in sorted((extra_files or {}).items()):
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        written.append(path)

    entries = sorted(
        (str(p.relative_to(out_dir)), sha256_file(p)) for p in written
    )
    manifest = "".join(f"{rel}\t{digest}\n" for rel, digest in entries)
    (out_dir / "manifest.tsv").write_text(manifest)
    return entries


# ---------------------------------------------------------------------------
# Flat key-value config files


def parse_config_text(path: str | Path) -> dict[str, str]:
    """Parse a flat "key = value" config file; '#' starts a comment line."""
    path = Path(path)
    out: dict[str, str] = {}
    with open(path, "r") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(path, line_no, "expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ParseError(path, line_no, "empty key")
            if key in out:
                raise ParseError(path, line_no, f"duplicate key {key!r}")
            out[key] = value
    return out
