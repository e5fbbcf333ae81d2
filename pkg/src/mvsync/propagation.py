"""Anchor selection, cross-view pixel propagation and masked refinement.

Well-edited anchor views are chosen per group of adjacent views (argmax of
an external per-view score, ties to the lowest index). Each anchor's pixels
are copied into its neighbors through the valid-correspondence pairing:
bilinear reads at subpixel anchor coordinates, writes at integer neighbor
pixels. Regions a neighbor could not receive (foreground minus replaced)
are then repainted by a short masked denoise conditioned on the already
edited image, with text guidance restricted to that region.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import ValidMaskPair
from .errors import (
    EmptyViewListError,
    MaskInconsistencyError,
    ShapeMismatchError,
)
from .noise_sync import DenoiseSchedule, GuidanceConfig, masked_cfg, shrink_mask, sigma_of
from .predictors import ConditioningMode, PredictorRequest


@dataclass
class AnchorGroup:
    member_ids: list[int]
    anchor_id: int


@dataclass
class AnchorPlan:
    groups: list[AnchorGroup]
    overlap_threshold: float

    def anchor_of(self, view_id: int) -> int:
        for group in self.groups:
            if view_id in group.member_ids:
                return group.anchor_id
        raise KeyError(f"view {view_id} not covered by the plan")


@dataclass
class EditedView:
    view_id: int
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    replaced_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.replaced_mask = np.asarray(self.replaced_mask, dtype=bool)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"edited image must be (3, H, W), got {self.image.shape}")
        if self.replaced_mask.shape != self.image.shape[1:]:
            raise ValueError("replaced_mask shape does not match image")

    @classmethod
    def fresh(cls, view_id: int, image: np.ndarray) -> "EditedView":
        image = np.asarray(image, dtype=np.float32)
        return cls(view_id=view_id, image=image.copy(), replaced_mask=np.zeros(image.shape[1:], dtype=bool))


def select_anchors(
    scores: list[tuple[int, float]],
    group_size: int,
    overlap_threshold: float = 0.8,
) -> AnchorPlan:
    """Partition views (in the given order) into consecutive groups and pick
    the highest-scoring member of each group as its anchor.

    Ties go to the lowest view index. The last group may be short.

    Raises:
        EmptyViewListError: no views.
        ValueError: group_size < 1.
    """
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    if not scores:
        raise EmptyViewListError("no views to select anchors from")
    groups: list[AnchorGroup] = []
    for start in range(0, len(scores), group_size):
        chunk = scores[start : start + group_size]
        best = max(range(len(chunk)), key=lambda i: (chunk[i][1], -i))
        groups.append(AnchorGroup(member_ids=[vid for vid, _ in chunk], anchor_id=chunk[best][0]))
    return AnchorPlan(groups=groups, overlap_threshold=overlap_threshold)


def read_scores(path: str | Path) -> dict[int, float]:
    """Read a per-view score file: lines of "view_id<TAB>score"."""
    out: dict[int, float] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        vid_text, _, score_text = line.partition("\t")
        out[int(vid_text)] = float(score_text)
    return out


def bilinear_sample_image(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample a (C, H, W) image at continuous (u, v) coordinates.

    Border handling clamps to the edge pixel. Returns (N, C).
    """
    image = np.asarray(image)
    c, h, w = image.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(v), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    c00 = image[:, y0, x0].T
    c10 = image[:, y0, x1].T
    c01 = image[:, y1, x0].T
    c11 = image[:, y1, x1].T
    top = c00 * (1 - fx) + c10 * fx
    bot = c01 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def propagate(anchor: EditedView, neighbor: EditedView, pair: ValidMaskPair) -> EditedView:
    """Replace the neighbor's valid-correspondence pixels with anchor reads.

    Writes land exactly on pair.tgt_coords; every other pixel of the
    neighbor is bit-identical to the input. replaced_mask records the
    written pixels.

    Raises:
        ShapeMismatchError: anchor and neighbor image shapes differ.
    """
    if anchor.image.shape != neighbor.image.shape:
        raise ShapeMismatchError(
            f"anchor {anchor.image.shape} vs neighbor {neighbor.image.shape}"
        )
    image = neighbor.image.copy()
    replaced = np.zeros(image.shape[1:], dtype=bool)
    if len(pair):
        colors = bilinear_sample_image(anchor.image, pair.ref_coords).astype(np.float32)
        xs = pair.tgt_coords[:, 0]
        ys = pair.tgt_coords[:, 1]
        image[:, ys, xs] = colors.T
        replaced[ys, xs] = True
    return EditedView(view_id=neighbor.view_id, image=image, replaced_mask=replaced)


def refinement_mask(fore_mask: np.ndarray, replaced_mask: np.ndarray) -> np.ndarray:
    """Region still needing text guidance: foreground minus replaced.

    Raises:
        MaskInconsistencyError: replaced pixels outside the foreground.
    """
    fore = np.asarray(fore_mask, dtype=bool)
    replaced = np.asarray(replaced_mask, dtype=bool)
    if fore.shape != replaced.shape:
        raise ShapeMismatchError(f"mask shapes differ: {fore.shape} vs {replaced.shape}")
    if np.any(replaced & ~fore):
        raise MaskInconsistencyError("replaced_mask is not contained in fore_mask")
    return fore & ~replaced


def masked_refine(
    view: EditedView,
    predictor,
    schedule: DenoiseSchedule | None,
    guidance: GuidanceConfig,
    refine_mask: np.ndarray,
    *,
    downscale: int = 1,
    prompt: str = "",
    seed: int = 0,
) -> EditedView:
    """Short masked denoise of one already-edited view.

    The conditioning image is the view's current (edited) image and the
    text-guidance mask is the binary refinement region, so pixels that were
    propagated from an anchor are reconstructed from the image condition
    rather than re-edited. schedule=None skips the pass entirely.

    The starting latent is the encoded edited image when the predictor
    exposes encode(); otherwise seeded noise scaled to the first timestep.
    """
    if schedule is None:
        return EditedView(view_id=view.view_id, image=view.image.copy(), replaced_mask=view.replaced_mask.copy())

    mask = np.asarray(refine_mask, dtype=bool)
    if mask.shape != view.image.shape[1:]:
        raise ShapeMismatchError(f"refinement mask {mask.shape} does not match image")
    mask_latent = shrink_mask(mask.astype(np.float64), downscale)

    if hasattr(predictor, "encode"):
        latent = np.asarray(predictor.encode(view.view_id, view.image), dtype=np.float32)
    else:
        rng = np.random.default_rng(seed)
        channels = getattr(predictor, "latent_channels", 4)
        h, w = view.image.shape[1:]
        latent = (
            sigma_of(schedule.t_first, schedule.t_first)
            * rng.standard_normal((channels, h // downscale, w // downscale))
        ).astype(np.float32)

    t_first = schedule.t_first
    for step, t in enumerate(schedule.timesteps[:-1]):
        t_next = schedule.timesteps[step + 1]
        d_sigma = sigma_of(t_next, t_first) - sigma_of(t, t_first)
        eps = {}
        for mode in (ConditioningMode.UNCOND, ConditioningMode.IMAGE, ConditioningMode.IMAGE_TEXT):
            response = predictor.query(
                PredictorRequest(
                    view_id=view.view_id,
                    timestep=t,
                    mode=mode,
                    latent=latent,
                    prompt=prompt if mode == ConditioningMode.IMAGE_TEXT else "",
                    cond_image=view.image if mode != ConditioningMode.UNCOND else None,
                )
            )
            eps[mode] = response.eps
        eps_hat = masked_cfg(
            eps[ConditioningMode.UNCOND],
            eps[ConditioningMode.IMAGE],
            eps[ConditioningMode.IMAGE_TEXT],
            guidance,
            mask_latent,
        )
        latent = (latent + d_sigma * eps_hat).astype(np.float32)

    image = np.asarray(predictor.decode(view.view_id, latent), dtype=np.float32)
    return EditedView(view_id=view.view_id, image=image, replaced_mask=view.replaced_mask.copy())
