"""Synchronized multi-view denoising.

Couples per-view denoising runs through three mechanisms:

    initial-noise alignment    per-view starting noise becomes a weighted
                               sum over corresponding cells of all views
    feature aggregation        hook-layer activations are replaced by their
                               correspondence-weighted combination and the
                               predictor re-queried with them injected
    masked guidance            the text-conditioned term of the two-scale
                               guidance combination is gated by a soft mask
                               (1 on foreground, decaying 0.5 -> 0 outside)

The builtin sampler is a deterministic (eta = 0) update in a
variance-exploding parameterization: z <- z + (sigma_next - sigma) * eps
with sigma(t) = t / t_first. A zero noise prediction therefore leaves the
latent untouched at every step.

Aggregated cell values are computed as the weighted sum clamped to the
per-cell [min, max] of the contributing values: the combination is convex
up to rounding, so the clamp changes nothing mathematically but makes
convexity and the identical-inputs fixed point exact in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .correspondence import CorrespondenceGraph
from .errors import (
    EmptyMaskError,
    NonFiniteLatentError,
    ShapeMismatchError,
    UnknownLayerError,
)
from .predictors import ConditioningMode, PredictorRequest
from .scene import PipelineConfig, SceneBundle


@dataclass
class GuidanceConfig:
    g_image: float
    g_text: float


@dataclass
class DenoiseSchedule:
    """Strictly descending integer timesteps with per-step alignment flags.

    The engine queries the predictor at timesteps[i] and advances the
    latent toward timesteps[i+1]; the final entry is the endpoint of the
    last update (conventionally 0).
    """

    timesteps: list[int]
    align_features: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.timesteps:
            raise ValueError("schedule must be nonempty")
        for a, b in zip(self.timesteps, self.timesteps[1:]):
            if b >= a:
                raise ValueError(f"timesteps must be strictly descending, got {a} -> {b}")
        if not self.align_features:
            self.align_features = [True] * len(self.timesteps)
        if len(self.align_features) != len(self.timesteps):
            raise ValueError("align_features length must match timesteps")

    @classmethod
    def uniform(cls, steps: int, t_max: int = 1000, align: bool = True) -> "DenoiseSchedule":
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if steps > t_max:
            raise ValueError(f"steps {steps} exceeds t_max {t_max}")
        ts = [int(round(t_max * (1 - i / steps))) for i in range(steps + 1)]
        return cls(timesteps=ts, align_features=[align] * (steps + 1))

    @property
    def t_first(self) -> int:
        return self.timesteps[0]


def sigma_of(t: float, t_first: float) -> float:
    """Noise scale of the builtin variance-exploding schedule."""
    return t / t_first


def check_grid(grid: np.ndarray, name: str = "grid") -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ShapeMismatchError(f"{name} must be (C, H, W), got shape {grid.shape}")
    if not np.isfinite(grid).all():
        raise ValueError(f"{name} contains non-finite values")
    return grid


def build_soft_mask(fore_mask: np.ndarray, decay_radius: float) -> np.ndarray:
    """Soft guidance mask: 1 on foreground, 0.5 * (1 - d / r) outside.

    d is the Euclidean distance transform to the foreground, so weights
    start just below 0.5 at the boundary and reach 0 at decay_radius.

    Raises:
        EmptyMaskError: the foreground mask has no set pixels.
    """
    fore = np.asarray(fore_mask, dtype=bool)
    if decay_radius <= 0:
        raise ValueError(f"decay_radius must be positive, got {decay_radius}")
    if not fore.any():
        raise EmptyMaskError("foreground mask is empty")
    dist = ndimage.distance_transform_edt(~fore)
    weights = np.where(fore, 1.0, np.maximum(0.0, 0.5 * (1.0 - dist / decay_radius)))
    return weights.astype(np.float64)


def shrink_mask(mask: np.ndarray, downscale: int) -> np.ndarray:
    """Nearest (center-based) downsampling of a 2-D mask or weight grid."""
    if downscale == 1:
        return np.asarray(mask).copy()
    h, w = mask.shape
    if h % downscale or w % downscale:
        raise ShapeMismatchError(f"mask {w}x{h} not divisible by {downscale}")
    ys = np.floor((np.arange(h // downscale) + 0.5) * downscale - 0.5 + 0.5).astype(np.int64)
    xs = np.floor((np.arange(w // downscale) + 0.5) * downscale - 0.5 + 0.5).astype(np.int64)
    return np.asarray(mask)[np.ix_(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1))]


def masked_cfg(
    eps_uncond: np.ndarray,
    eps_img: np.ndarray,
    eps_full: np.ndarray,
    guidance: GuidanceConfig,
    soft_mask: np.ndarray,
) -> np.ndarray:
    """Two-scale guidance combination with the text term gated per pixel.

    out = eps_uncond + g_image * (eps_img - eps_uncond)
                     + g_text  * (eps_full - eps_img) * mask
    """
    eps_uncond = np.asarray(eps_uncond)
    if eps_img.shape != eps_uncond.shape or eps_full.shape != eps_uncond.shape:
        raise ShapeMismatchError(
            f"eps shapes differ: {eps_uncond.shape} / {eps_img.shape} / {eps_full.shape}"
        )
    mask = np.asarray(soft_mask)
    if mask.ndim == 2:
        if mask.shape != eps_uncond.shape[1:]:
            raise ShapeMismatchError(f"mask {mask.shape} does not match grids {eps_uncond.shape}")
        mask = mask[None, :, :]
    elif mask.shape != eps_uncond.shape:
        raise ShapeMismatchError(f"mask {mask.shape} does not match grids {eps_uncond.shape}")
    return (
        eps_uncond
        + guidance.g_image * (eps_img - eps_uncond)
        + guidance.g_text * (eps_full - eps_img) * mask
    )


# ---------------------------------------------------------------------------
# Correspondence-weighted aggregation


def _aggregate(
    grids: dict[int, np.ndarray],
    graphs: dict[int, CorrespondenceGraph],
) -> dict[int, np.ndarray]:
    """Weighted cross-view combination of per-view grids (shared core).

    Cells without a mapped correspondence pass through unchanged. Each
    aggregated cell is clamped to the [min, max] of its contributors.
    """
    ids = sorted(grids)
    shapes = {grids[i].shape for i in ids}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"per-view grids disagree in shape: {shapes}")
    c, gh, gw = next(iter(shapes))
    stacked = np.stack([np.asarray(grids[i], dtype=np.float64) for i in ids], axis=0)
    flat = stacked.reshape(len(ids), c, gh * gw)
    pos_of = {vid: i for i, vid in enumerate(ids)}

    out: dict[int, np.ndarray] = {}
    for vid in ids:
        graph = graphs.get(vid)
        result = stacked[pos_of[vid]].copy()
        if graph is not None and graph.entries:
            cmap = graph.cell_map(gh, gw)
            if cmap.out_cell.size:
                try:
                    view_pos = np.array([pos_of[v] for v in cmap.src_view])
                except KeyError as e:
                    raise ShapeMismatchError(f"graph references view {e} absent from grids") from e
                contrib = flat[view_pos, :, cmap.src_cell]  # (J, C)
                weighted = contrib * cmap.weight[:, None]
                acc = np.zeros((gh * gw, c))
                lo = np.full((gh * gw, c), np.inf)
                hi = np.full((gh * gw, c), -np.inf)
                np.add.at(acc, cmap.out_cell, weighted)
                np.minimum.at(lo, cmap.out_cell, contrib)
                np.maximum.at(hi, cmap.out_cell, contrib)
                cells = np.unique(cmap.out_cell)
                combined = np.clip(acc[cells], lo[cells], hi[cells])
                res_flat = result.reshape(c, gh * gw)
                res_flat[:, cells] = combined.T
                result = res_flat.reshape(c, gh, gw)
        out[vid] = result.astype(grids[vid].dtype, copy=False)
    return out


def align_initial_noise(
    noises: dict[int, np.ndarray],
    graphs: dict[int, CorrespondenceGraph],
    latent_downscale: int,
) -> dict[int, np.ndarray]:
    """Cross-view weighted combination of initial noise grids.

    Correspondences are mapped to the latent grid by center-based division
    by latent_downscale (nearest cell, lowest pixel index on collision);
    latent cells without matches keep their original noise.

    Raises:
        ShapeMismatchError: grids disagree, or image size is not
            latent_downscale times the grid size.
    """
    for vid, grid in noises.items():
        check_grid(grid, f"noise[{vid}]")
        graph = graphs.get(vid)
        if graph is not None:
            c, gh, gw = grid.shape
            if gh * latent_downscale != graph.height or gw * latent_downscale != graph.width:
                raise ShapeMismatchError(
                    f"view {vid}: noise {gw}x{gh} times downscale {latent_downscale} "
                    f"does not match image {graph.width}x{graph.height}"
                )
    return _aggregate(noises, graphs)


def aggregate_features(
    features: dict[int, np.ndarray],
    graphs: dict[int, CorrespondenceGraph],
    layer_id: int,
    aligned_layers: tuple[int, ...],
) -> dict[int, np.ndarray]:
    """Correspondence-weighted combination of one hook layer across views.

    The layer grid may sit at any resolution that divides the image
    resolution; correspondence coordinates are rescaled to it.

    Raises:
        UnknownLayerError: layer_id is not in the aligned set.
        ShapeMismatchError: grid resolution does not divide the image.
    """
    if layer_id not in aligned_layers:
        raise UnknownLayerError(f"layer {layer_id} not in aligned layers {sorted(aligned_layers)}")
    for vid, grid in features.items():
        check_grid(grid, f"features[{vid}]")
        graph = graphs.get(vid)
        if graph is not None:
            c, gh, gw = grid.shape
            if graph.height % gh or graph.width % gw:
                raise ShapeMismatchError(
                    f"view {vid}: layer grid {gw}x{gh} does not divide image "
                    f"{graph.width}x{graph.height}"
                )
    return _aggregate(features, graphs)


# ---------------------------------------------------------------------------
# The synchronized loop


def run_synchronized_denoise(
    bundle: SceneBundle,
    predictor,
    schedule: DenoiseSchedule,
    config: PipelineConfig | None = None,
    graphs: dict[int, CorrespondenceGraph] | None = None,
    *,
    prompt: str = "",
    seed: int = 0,
    initial_latents: dict[int, np.ndarray] | None = None,
    align_initial: bool = True,
    threads: int = 1,
) -> dict[int, np.ndarray]:
    """Denoise all views in lockstep and decode the edited images.

    Per step and per conditioning mode, every view is queried once to
    capture hook features; when the step's alignment flag is set the
    features are aggregated across views and the predictor re-queried with
    the aggregated grids injected. The three per-view noise estimates are
    combined with masked_cfg and the latent advanced by the builtin
    deterministic update. After the last step the latents are decoded
    through the predictor.

    initial_latents, when given, are used as the starting z (stage
    separation for the pipeline); otherwise seeded per-view standard noise
    is drawn in bundle order, optionally aligned, and scaled by sigma of
    the first timestep.

    Raises:
        NonFiniteLatentError: a latent went NaN/Inf (carries the step index).
    """
    config = config or bundle.config
    graphs = graphs or {}
    guidance = GuidanceConfig(g_image=config.g_image, g_text=config.g_text)
    ds = config.latent_downscale
    w, h = bundle.views[0].size
    if h % ds or w % ds:
        raise ShapeMismatchError(f"image {w}x{h} not divisible by latent downscale {ds}")
    gh, gw = h // ds, w // ds
    channels = getattr(predictor, "latent_channels", config.latent_channels)

    soft_masks: dict[int, np.ndarray] = {}
    for view in bundle.views:
        if view.fore_mask is not None and view.fore_mask.any():
            soft = build_soft_mask(view.fore_mask, config.decay_radius)
        else:
            soft = np.ones((h, w))
        soft_masks[view.id] = shrink_mask(soft, ds)

    if initial_latents is None:
        rng = np.random.default_rng(seed)
        noises = {
            view.id: rng.standard_normal((channels, gh, gw)).astype(np.float32)
            for view in bundle.views
        }
        if align_initial and graphs:
            noises = align_initial_noise(noises, graphs, ds)
        sigma0 = sigma_of(schedule.t_first, schedule.t_first)
        latents = {vid: (sigma0 * n).astype(np.float32) for vid, n in noises.items()}
    else:
        latents = {vid: np.asarray(z, dtype=np.float32).copy() for vid, z in initial_latents.items()}

    ordered_ids = bundle.view_ids()
    cond_images = {view.id: view.image for view in bundle.views}

    def query_all(mode: ConditioningMode, t: int, hook: tuple[int, ...], injected=None):
        requests = [
            PredictorRequest(
                view_id=vid,
                timestep=t,
                mode=mode,
                latent=latents[vid],
                prompt=prompt if mode == ConditioningMode.IMAGE_TEXT else "",
                hook_layers=hook,
                cond_image=cond_images[vid] if mode != ConditioningMode.UNCOND else None,
                injected_features=(injected or {}).get(vid, {}),
            )
            for vid in ordered_ids
        ]
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                responses = list(pool.map(predictor.query, requests))
        else:
            responses = [predictor.query(r) for r in requests]
        return dict(zip(ordered_ids, responses))

    t_first = schedule.t_first
    for step, t in enumerate(schedule.timesteps[:-1]):
        t_next = schedule.timesteps[step + 1]
        d_sigma = sigma_of(t_next, t_first) - sigma_of(t, t_first)
        align_now = schedule.align_features[step] and bool(graphs)
        hook = tuple(config.aligned_layers) if align_now else ()

        eps_by_mode: dict[ConditioningMode, dict[int, np.ndarray]] = {}
        for mode in (ConditioningMode.UNCOND, ConditioningMode.IMAGE, ConditioningMode.IMAGE_TEXT):
            responses = query_all(mode, t, hook)
            if align_now:
                injected: dict[int, dict[int, np.ndarray]] = {vid: {} for vid in ordered_ids}
                for layer in config.aligned_layers:
                    layer_grids = {vid: responses[vid].features[layer] for vid in ordered_ids}
                    merged = aggregate_features(layer_grids, graphs, layer, config.aligned_layers)
                    for vid in ordered_ids:
                        injected[vid][layer] = merged[vid]
                responses = query_all(mode, t, (), injected=injected)
            eps_by_mode[mode] = {vid: responses[vid].eps for vid in ordered_ids}

        for vid in ordered_ids:
            with np.errstate(invalid="ignore", over="ignore"):
                eps_hat = masked_cfg(
                    eps_by_mode[ConditioningMode.UNCOND][vid],
                    eps_by_mode[ConditioningMode.IMAGE][vid],
                    eps_by_mode[ConditioningMode.IMAGE_TEXT][vid],
                    guidance,
                    soft_masks[vid],
                )
                latents[vid] = (latents[vid] + d_sigma * eps_hat).astype(np.float32)
            if not np.isfinite(latents[vid]).all():
                raise NonFiniteLatentError(step)

    return {vid: np.asarray(predictor.decode(vid, latents[vid]), dtype=np.float32) for vid in ordered_ids}
