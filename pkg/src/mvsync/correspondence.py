"""Dense multi-view correspondence graphs with geometric verification.

For every foreground pixel of a reference view, candidate matches in other
views are produced by depth reprojection and kept only when they pass two
strict gates:

    depth gate:  |reprojected depth - candidate view depth| < tau_d
    cycle gate:  |roundtrip pixel - reference pixel|        < tau_p

Surviving matches carry weights exp(-mu * delta), normalized per reference
pixel. The reference pixel always participates as its own zero-error match,
so downstream aggregation is a convex combination that includes the view's
own value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    MIN_DEPTH,
    Camera,
    PixelCoord,
    backproject_many,
    project_many,
    sample_depth_bilinear,
)
from .errors import MissingDepthError, UnknownViewError
from .scene import PipelineConfig, SceneBundle, ViewRecord

# Fraction of the scene depth range used when tau_d is left unset.
AUTO_TAU_D_FRACTION = 0.01

# Depth disagreements below this are float noise from the reprojection
# roundtrip; snapping them to zero keeps geometrically exact scenes exactly
# symmetric (identical views get identical weights, bit for bit).
DELTA_SNAP = 1e-9


def depth_filter(delta: float, tau_d: float) -> bool:
    """Depth gate: keep a match iff delta < tau_d (strictly)."""
    return delta < tau_d


def cycle_filter(ref_pixel, roundtrip_pixel, tau_p: float) -> bool:
    """Cycle gate: keep iff the roundtrip lands within tau_p (strictly)."""
    du = float(roundtrip_pixel[0]) - float(ref_pixel[0])
    dv = float(roundtrip_pixel[1]) - float(ref_pixel[1])
    return float(np.hypot(du, dv)) < tau_p


def match_weight(delta: float, mu: float) -> float:
    """Unnormalized match weight exp(-mu * delta)."""
    return float(np.exp(-mu * delta))


def normalize_weights(weights: np.ndarray) -> np.ndarray:
    """Scale nonnegative weights to sum to 1."""
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights must have positive mass")
    return weights / total


def resolve_tau_d(bundle: SceneBundle, config: PipelineConfig) -> float:
    if config.tau_d is not None:
        return config.tau_d
    lo, hi = bundle.depth_range()
    span = hi - lo
    if span <= 0:
        span = hi  # degenerate single-depth scene
    return AUTO_TAU_D_FRACTION * span


@dataclass(slots=True)
class Match:
    view_id: int
    pixel: PixelCoord
    delta: float
    weight: float


@dataclass
class _CellMap:
    """Flattened correspondence arrays mapped to a coarser grid.

    One row per (reference cell, contributing view) after first-hit
    deduplication of reference pixels onto cells. Built once per grid shape
    and cached on the graph; aggregation then runs fully vectorized.
    """

    out_cell: np.ndarray  # (J,) flat index into the reference grid
    src_view: np.ndarray  # (J,) contributing view id
    src_cell: np.ndarray  # (J,) flat index into the contributing grid
    weight: np.ndarray  # (J,) normalized weight


@dataclass
class CorrespondenceGraph:
    """Per reference pixel, the verified matches into candidate views.

    entries maps flat pixel index (y * width + x) to matches sorted by
    ascending view id; the self-match is always present. weight_mass holds
    the per-pixel sum of unnormalized weights (zero where unmatched).
    """

    ref_view: int
    width: int
    height: int
    entries: dict[int, list[Match]]
    weight_mass: np.ndarray
    _cell_maps: dict[tuple[int, int], _CellMap] = field(default_factory=dict, repr=False)

    def pixel_index(self, x: int, y: int) -> int:
        return y * self.width + x

    def matches_at(self, x: int, y: int) -> list[Match]:
        return self.entries.get(self.pixel_index(x, y), [])

    def match_count(self) -> int:
        return sum(len(m) for m in self.entries.values())

    def cell_map(self, grid_height: int, grid_width: int) -> _CellMap:
        """Correspondences mapped to a (grid_height, grid_width) grid.

        The image must be an integer multiple of the grid in both axes.
        Collisions (several reference pixels landing in one cell) keep the
        lowest pixel index.
        """
        key = (grid_height, grid_width)
        cached = self._cell_maps.get(key)
        if cached is not None:
            return cached
        if self.height % grid_height or self.width % grid_width:
            raise ValueError(
                f"grid {grid_width}x{grid_height} does not divide image {self.width}x{self.height}"
            )
        sx = self.width // grid_width
        sy = self.height // grid_height

        out_cells: list[int] = []
        src_views: list[int] = []
        src_cells: list[int] = []
        weights: list[float] = []
        claimed = np.zeros(grid_height * grid_width, dtype=bool)
        for pix_idx in sorted(self.entries):
            x = pix_idx % self.width
            y = pix_idx // self.width
            cx = _to_cell(x, sx, grid_width)
            cy = _to_cell(y, sy, grid_height)
            cell = cy * grid_width + cx
            if claimed[cell]:
                continue
            claimed[cell] = True
            for m in self.entries[pix_idx]:
                mx = _to_cell(m.pixel.u, sx, grid_width)
                my = _to_cell(m.pixel.v, sy, grid_height)
                out_cells.append(cell)
                src_views.append(m.view_id)
                src_cells.append(my * grid_width + mx)
                weights.append(m.weight)

        cmap = _CellMap(
            out_cell=np.asarray(out_cells, dtype=np.int64),
            src_view=np.asarray(src_views, dtype=np.int64),
            src_cell=np.asarray(src_cells, dtype=np.int64),
            weight=np.asarray(weights, dtype=np.float64),
        )
        self._cell_maps[key] = cmap
        return cmap


def _to_cell(coord: float, scale: int, limit: int) -> int:
    # Center-based nearest cell: cell centers sit at c*scale + (scale-1)/2.
    return min(max(int(np.floor((coord + 0.5) / scale)), 0), limit - 1)


@dataclass
class ValidMaskPair:
    """Valid-correspondence masks between an anchor and one neighbor.

    tgt_coords are integer neighbor pixels (one per pair); ref_coords are
    the matching subpixel anchor coordinates obtained by reprojecting each
    target pixel back through the neighbor's depth, so reading the anchor
    at ref_coords realizes an exact backward warp.
    """

    ref_mask: np.ndarray  # (H, W) bool over the anchor
    tgt_mask: np.ndarray  # (H, W) bool over the neighbor
    ref_coords: np.ndarray  # (N, 2) float64 (u, v)
    tgt_coords: np.ndarray  # (N, 2) int64 (x, y)

    @property
    def pairing(self) -> list[tuple[PixelCoord, tuple[int, int]]]:
        return [
            (PixelCoord(float(u), float(v)), (int(x), int(y)))
            for (u, v), (x, y) in zip(self.ref_coords, self.tgt_coords)
        ]

    def __len__(self) -> int:
        return self.tgt_coords.shape[0]


def _foreground_selection(view: ViewRecord) -> tuple[np.ndarray, np.ndarray]:
    if view.depth is None:
        raise MissingDepthError(f"view {view.id} has no depth map")
    sel = view.depth.valid
    if view.fore_mask is not None:
        sel = sel & view.fore_mask
    ys, xs = np.nonzero(sel)
    return xs.astype(np.int64), ys.astype(np.int64)


def build_graph(
    bundle: SceneBundle,
    ref_view: int,
    candidate_views: list[int],
    config: PipelineConfig | None = None,
) -> CorrespondenceGraph:
    """Build the verified correspondence graph for one reference view.

    Every foreground pixel with valid depth is reprojected into each
    candidate view; matches surviving the depth and cycle gates (plus frame
    bounds) are kept with normalized exp(-mu * delta) weights. The self
    match (delta 0) is always included.

    Raises:
        MissingDepthError: the reference or a candidate view has no depth.
    """
    config = config or bundle.config
    ref = bundle.view(ref_view)
    w, h = ref.size
    xs, ys = _foreground_selection(ref)
    tau_d = resolve_tau_d(bundle, config)
    tau_p = config.tau_p
    mu = config.mu
    pix_idx = ys * w + xs
    uv_ref = np.stack([xs.astype(np.float64), ys.astype(np.float64)], axis=1)
    d_ref = ref.depth.values[ys, xs]
    points = backproject_many(ref.camera, uv_ref, d_ref)

    all_pix: list[np.ndarray] = [pix_idx]
    all_view: list[np.ndarray] = [np.full(pix_idx.shape, ref_view, dtype=np.int64)]
    all_u: list[np.ndarray] = [uv_ref[:, 0]]
    all_v: list[np.ndarray] = [uv_ref[:, 1]]
    all_delta: list[np.ndarray] = [np.zeros(pix_idx.shape)]

    for cand_id in sorted(set(candidate_views)):
        if cand_id == ref_view:
            continue
        cand = bundle.view(cand_id)
        if cand.depth is None:
            raise MissingDepthError(f"candidate view {cand_id} has no depth map")
        uv_k, z_k = project_many(cand.camera, points)
        ok = z_k > MIN_DEPTH
        uv_k = np.where(ok[:, None], uv_k, 0.0)
        d_k, ok_d = sample_depth_bilinear(cand.depth, uv_k)
        ok &= ok_d
        delta = np.abs(z_k - d_k)
        delta = np.where(delta < DELTA_SNAP, 0.0, delta)
        ok &= delta < tau_d

        back = backproject_many(cand.camera, uv_k, np.where(d_k > 0, d_k, 1.0))
        uv_rt, z_rt = project_many(ref.camera, back)
        ok &= z_rt > MIN_DEPTH
        with np.errstate(invalid="ignore"):
            dist = np.hypot(uv_rt[:, 0] - uv_ref[:, 0], uv_rt[:, 1] - uv_ref[:, 1])
        ok &= np.where(np.isfinite(dist), dist < tau_p, False)

        keep = np.nonzero(ok)[0]
        if keep.size == 0:
            continue
        all_pix.append(pix_idx[keep])
        all_view.append(np.full(keep.shape, cand_id, dtype=np.int64))
        all_u.append(uv_k[keep, 0])
        all_v.append(uv_k[keep, 1])
        all_delta.append(delta[keep])

    pix = np.concatenate(all_pix)
    view = np.concatenate(all_view)
    mu_u = np.concatenate(all_u)
    mu_v = np.concatenate(all_v)
    delta = np.concatenate(all_delta)
    weight_raw = np.exp(-mu * delta)

    mass_flat = np.bincount(pix, weights=weight_raw, minlength=h * w)
    weight = weight_raw / mass_flat[pix]

    order = np.lexsort((view, pix))
    entries: dict[int, list[Match]] = {}
    for j in order:
        entries.setdefault(int(pix[j]), []).append(
            Match(
                view_id=int(view[j]),
                pixel=PixelCoord(float(mu_u[j]), float(mu_v[j])),
                delta=float(delta[j]),
                weight=float(weight[j]),
            )
        )

    return CorrespondenceGraph(
        ref_view=ref_view,
        width=w,
        height=h,
        entries=entries,
        weight_mass=mass_flat.reshape(h, w),
    )


def build_graphs(
    bundle: SceneBundle, config: PipelineConfig | None = None
) -> dict[int, CorrespondenceGraph]:
    """Build one graph per view, each using all other views as candidates."""
    ids = bundle.view_ids()
    return {vid: build_graph(bundle, vid, [k for k in ids if k != vid], config) for vid in ids}


def extract_valid_pair(
    bundle: SceneBundle,
    graph: CorrespondenceGraph,
    anchor_id: int,
    neighbor_id: int,
) -> ValidMaskPair:
    """Valid-correspondence masks and the backward-warp pairing.

    The graph must have been built with the anchor as its reference view;
    it defines the anchor-side region of verified correspondences into the
    neighbor. Pairs are enumerated on the neighbor side so propagation is a
    dense backward warp: every neighbor foreground pixel is reprojected
    through the neighbor's depth into the anchor, kept when it passes the
    depth and cycle gates and lands (nearest pixel) inside the anchor's
    verified region, then deduplicated on the rounded anchor pixel so both
    rasterized masks count exactly one pair per set bit.

    Raises:
        UnknownViewError: neighbor_id absent from the bundle.
        MissingDepthError: the neighbor has no depth map.
        ValueError: graph reference does not match anchor_id.
    """
    if graph.ref_view != anchor_id:
        raise ValueError(f"graph was built for view {graph.ref_view}, not anchor {anchor_id}")
    anchor = bundle.view(anchor_id)
    neighbor = bundle.view(neighbor_id)
    if neighbor.depth is None:
        raise MissingDepthError(f"neighbor view {neighbor_id} has no depth map")
    if anchor.depth is None:
        raise MissingDepthError(f"anchor view {anchor_id} has no depth map")
    h, w = anchor.image.shape[1:]
    config = bundle.config

    # Anchor pixels with a verified match into this neighbor.
    anchor_valid = np.zeros(h * w, dtype=bool)
    for pix_idx, matches in graph.entries.items():
        for m in matches:
            if m.view_id == neighbor_id:
                anchor_valid[pix_idx] = True
                break

    empty = ValidMaskPair(
        ref_mask=np.zeros((h, w), dtype=bool),
        tgt_mask=np.zeros((h, w), dtype=bool),
        ref_coords=np.empty((0, 2), dtype=np.float64),
        tgt_coords=np.empty((0, 2), dtype=np.int64),
    )
    if not anchor_valid.any():
        return empty

    sel = neighbor.depth.valid
    if neighbor.fore_mask is not None:
        sel = sel & neighbor.fore_mask
    qys, qxs = np.nonzero(sel)
    if qys.size == 0:
        return empty
    q_uv = np.stack([qxs.astype(np.float64), qys.astype(np.float64)], axis=1)
    d_q = neighbor.depth.values[qys, qxs]

    back = backproject_many(neighbor.camera, q_uv, d_q)
    r_uv, r_z = project_many(anchor.camera, back)
    keep = r_z > MIN_DEPTH
    with np.errstate(invalid="ignore"):
        keep &= np.isfinite(r_uv).all(axis=1)
        r_uv = np.where(keep[:, None], r_uv, 0.0)
        keep &= (r_uv[:, 0] >= -0.5) & (r_uv[:, 0] < w - 0.5)
        keep &= (r_uv[:, 1] >= -0.5) & (r_uv[:, 1] < h - 0.5)

    # Symmetric gates through the anchor's depth at the landing point.
    tau_d = resolve_tau_d(bundle, config)
    d_r, ok_d = sample_depth_bilinear(anchor.depth, r_uv)
    keep &= ok_d
    keep &= np.abs(r_z - d_r) < tau_d
    fwd = backproject_many(anchor.camera, r_uv, np.where(d_r > 0, d_r, 1.0))
    rt_uv, rt_z = project_many(neighbor.camera, fwd)
    keep &= rt_z > MIN_DEPTH
    with np.errstate(invalid="ignore"):
        dist = np.hypot(rt_uv[:, 0] - q_uv[:, 0], rt_uv[:, 1] - q_uv[:, 1])
    keep &= np.where(np.isfinite(dist), dist < config.tau_p, False)

    # The rounded landing pixel must belong to the verified anchor region.
    r_px = np.floor(r_uv[:, 0] + 0.5).astype(np.int64)
    r_py = np.floor(r_uv[:, 1] + 0.5).astype(np.int64)
    in_grid = (r_px >= 0) & (r_px < w) & (r_py >= 0) & (r_py < h)
    keep &= in_grid
    flat_safe = np.clip(r_py, 0, h - 1) * w + np.clip(r_px, 0, w - 1)
    keep &= anchor_valid[flat_safe]

    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return empty

    # One pair per rounded anchor pixel: the landing nearest that pixel's
    # center wins, ties to the lowest neighbor pixel index.
    r_flat = flat_safe[idx]
    center_dist = np.hypot(r_uv[idx, 0] - r_px[idx], r_uv[idx, 1] - r_py[idx])
    order = np.lexsort((idx, center_dist, r_flat))
    r_sorted = r_flat[order]
    first = np.ones(order.shape, dtype=bool)
    first[1:] = r_sorted[1:] != r_sorted[:-1]
    chosen = np.sort(order[first])
    idx = idx[chosen]

    ref_mask = np.zeros((h, w), dtype=bool)
    tgt_mask = np.zeros((h, w), dtype=bool)
    ref_mask[r_py[idx], r_px[idx]] = True
    tgt_mask[qys[idx], qxs[idx]] = True
    return ValidMaskPair(
        ref_mask=ref_mask,
        tgt_mask=tgt_mask,
        ref_coords=r_uv[idx],
        tgt_coords=np.stack([qxs[idx], qys[idx]], axis=1),
    )


def graph_stats_text(graphs: dict[int, CorrespondenceGraph]) -> str:
    """Per-view match-count histogram as line-oriented text."""
    lines = ["# view_id\tpixels_matched\ttotal_matches\thistogram(matches_per_pixel -> count)"]
    for view_id in sorted(graphs):
        g = graphs[view_id]
        counts = np.asarray([len(m) for m in g.entries.values()], dtype=np.int64)
        hist: dict[int, int] = {}
        for c in counts:
            hist[int(c)] = hist.get(int(c), 0) + 1
        hist_text = ",".join(f"{k}:{v}" for k, v in sorted(hist.items()))
        lines.append(f"{view_id}\t{len(g.entries)}\t{int(counts.sum()) if counts.size else 0}\t{hist_text}")
    return "\n".join(lines) + "\n"
