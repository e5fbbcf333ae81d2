"""Score-predictor interface and deterministic builtin predictors.

The denoising engine talks to a predictor through three calls: query()
(noise estimate plus hook-layer features for one conditioning mode),
decode() (latent to image) and optionally encode() (image to latent). Real
diffusion editors are reached over the wire protocol (see protocol.py);
the builtins below are analytic stand-ins used for tests and pipeline
development.

Builtin latents are image-space: 3 channels at 1/downscale resolution,
encode is block averaging and decode nearest upsampling, so downscale=1
makes them exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ShapeMismatchError


class ConditioningMode(IntEnum):
    UNCOND = 0
    IMAGE = 1
    IMAGE_TEXT = 2


@dataclass
class PredictorRequest:
    view_id: int
    timestep: int
    mode: ConditioningMode
    latent: np.ndarray  # (C, h, w) float32
    prompt: str = ""
    hook_layers: tuple[int, ...] = ()
    cond_image: np.ndarray | None = None  # (3, H, W) float32
    injected_features: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class PredictorResponse:
    eps: np.ndarray  # same shape as the request latent
    features: dict[int, np.ndarray] = field(default_factory=dict)


def encode_image(image: np.ndarray, downscale: int) -> np.ndarray:
    """Block-average an image (C, H, W) down to (C, H/s, W/s)."""
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    if h % downscale or w % downscale:
        raise ShapeMismatchError(f"image {w}x{h} not divisible by downscale {downscale}")
    if downscale == 1:
        return image.copy()
    return image.reshape(c, h // downscale, downscale, w // downscale, downscale).mean(axis=(2, 4))


def decode_latent(latent: np.ndarray, downscale: int) -> np.ndarray:
    """Nearest-upsample a latent back to image resolution, clipped to [0, 1]."""
    latent = np.asarray(latent, dtype=np.float32)
    up = np.repeat(np.repeat(latent, downscale, axis=1), downscale, axis=2)
    return np.clip(up, 0.0, 1.0)


def hue_rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate RGB values around the gray axis by the given angle."""
    theta = np.deg2rad(degrees)
    axis = np.ones(3) / np.sqrt(3.0)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.cos(theta) * np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * np.outer(axis, axis)
    c, h, w = image.shape
    flat = image.reshape(c, -1)
    return (rot.astype(np.float32) @ flat).reshape(c, h, w)


# Orthonormal basis of the chroma plane (perpendicular to the gray axis).
_CHROMA_E1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
_CHROMA_E2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)


def chroma_reset(image: np.ndarray, angle: float) -> np.ndarray:
    """Recolor an image by resetting every pixel's chroma direction.

    Per pixel, luminance (channel mean) and chroma magnitude are kept and
    the chroma direction is set to the unit vector at `angle` in the chroma
    plane. Applying the same reset twice is an exact no-op.
    """
    image = np.asarray(image, dtype=np.float32)
    luma = image.mean(axis=0, keepdims=True)
    chroma = image - luma
    mag = np.sqrt((chroma**2).sum(axis=0, keepdims=True))
    direction = (np.cos(angle) * _CHROMA_E1 + np.sin(angle) * _CHROMA_E2).astype(np.float32)
    return luma + mag * direction[:, None, None]


def selective_chroma_reset(image: np.ndarray, angle: float, base: float, width: float) -> np.ndarray:
    """chroma_reset applied only outside the edited-gamut cone.

    Pixels whose chroma direction already lies within `width` of `base` are
    kept, the way an instruction editor leaves regions that satisfy the
    instruction alone, so edits by *any* view (or any blend of them) are a
    fixed point of every view's editor.
    """
    image = np.asarray(image, dtype=np.float32)
    luma = image.mean(axis=0, keepdims=True)
    chroma = image - luma
    c1 = (chroma * _CHROMA_E1[:, None, None].astype(np.float32)).sum(axis=0)
    c2 = (chroma * _CHROMA_E2[:, None, None].astype(np.float32)).sum(axis=0)
    phi = np.arctan2(c2, c1)
    gap = np.abs(np.angle(np.exp(1j * (phi - base))))
    inside = gap <= width
    reset = chroma_reset(image, angle)
    return np.where(inside[None, :, :], image, reset)


class ZeroPredictor:
    """Predicts zero noise and zero features; the denoising fixed point."""

    def __init__(self, downscale: int = 1):
        self.downscale = downscale
        self.latent_channels = 3

    def query(self, request: PredictorRequest) -> PredictorResponse:
        z = np.zeros_like(request.latent)
        return PredictorResponse(eps=z, features={l: z.copy() for l in request.hook_layers})

    def decode(self, view_id: int, latent: np.ndarray) -> np.ndarray:
        return decode_latent(latent, self.downscale)

    def encode(self, view_id: int, image: np.ndarray) -> np.ndarray:
        return encode_image(image, self.downscale)


class SyntheticEditPredictor:
    """Deterministic hue-recoloring editor for end-to-end testing.

    Each conditioning mode pulls the latent toward an analytic target:

        uncond      zero
        image       encode(conditioning image)
        image+text  encode(conditioning image) + edit direction

    The edit is a selective chroma reset (see selective_chroma_reset):
    luminance-preserving, exactly idempotent, recoloring only pixels whose
    chroma direction lies outside the edited-gamut cone. The target angle
    inside the cone is keyed continuously on the conditioning image's
    luminance statistics, so views of the same scene disagree (their crops
    differ) while any already-edited image, by any view or blend of views,
    is a fixed point of every view's editor. Hook features expose the
    view's own edit direction at latent resolution; injected features
    replace it (mean over provided layers), which is how cross-view
    alignment takes effect.

    eps is (latent - target) / sigma(t); with the engine's sigma-scaled
    update the latent contracts exactly onto the target as sigma reaches 0.
    """

    def __init__(
        self,
        downscale: int = 1,
        t_max: int = 1000,
        base_angle: float = 2.0,
        jitter_angle: float = 0.9,
        cone_width: float = 1.0,
    ):
        self.downscale = downscale
        self.t_max = t_max
        self.base_angle = base_angle
        self.jitter_angle = jitter_angle
        self.cone_width = cone_width
        self.latent_channels = 3

    def _sigma(self, t: int) -> float:
        return t / self.t_max

    def _edit_angle(self, cond_image: np.ndarray) -> float:
        # Continuous functional of luminance only: invariant under the
        # chroma edit, barely moved by propagation, distinct across views.
        luma = np.asarray(cond_image, dtype=np.float64).mean(axis=0)
        m = float(luma.mean())
        s = float(luma.std())
        return self.base_angle + self.jitter_angle * np.sin(2 * np.pi * (3.7 * m + 9.1 * s))

    def _edit_direction(self, cond_image: np.ndarray) -> np.ndarray:
        angle = self._edit_angle(cond_image)
        edited = selective_chroma_reset(cond_image, angle, self.base_angle, self.cone_width)
        return encode_image(edited, self.downscale) - encode_image(cond_image, self.downscale)

    def query(self, request: PredictorRequest) -> PredictorResponse:
        latent = np.asarray(request.latent, dtype=np.float32)
        mode = ConditioningMode(request.mode)
        if mode != ConditioningMode.UNCOND and request.cond_image is None:
            raise ValueError(f"mode {mode.name} requires a conditioning image")

        features: dict[int, np.ndarray] = {}
        direction = None
        if request.cond_image is not None:
            direction = self._edit_direction(request.cond_image)
            if direction.shape != latent.shape:
                raise ShapeMismatchError(
                    f"conditioning image encodes to {direction.shape}, latent is {latent.shape}"
                )
            for layer in request.hook_layers:
                features[layer] = direction.astype(np.float32)
        else:
            for layer in request.hook_layers:
                features[layer] = np.zeros_like(latent)

        if mode == ConditioningMode.UNCOND:
            target = np.zeros_like(latent)
        elif mode == ConditioningMode.IMAGE:
            target = encode_image(request.cond_image, self.downscale)
        else:
            if request.injected_features:
                inject = [np.asarray(f, dtype=np.float32) for f in request.injected_features.values()]
                for f in inject:
                    if f.shape != latent.shape:
                        raise ShapeMismatchError(
                            f"injected feature {f.shape} does not match latent {latent.shape}"
                        )
                direction = np.mean(inject, axis=0)
            target = encode_image(request.cond_image, self.downscale) + direction

        sigma = self._sigma(request.timestep)
        if sigma <= 0:
            eps = np.zeros_like(latent)
        else:
            eps = (latent - target.astype(np.float32)) / np.float32(sigma)
        return PredictorResponse(eps=eps, features=features)

    def decode(self, view_id: int, latent: np.ndarray) -> np.ndarray:
        return decode_latent(latent, self.downscale)

    def encode(self, view_id: int, image: np.ndarray) -> np.ndarray:
        return encode_image(image, self.downscale)


def make_builtin_predictor(name: str, *, downscale: int, t_max: int = 1000):
    if name == "zero":
        return ZeroPredictor(downscale=downscale)
    if name == "synthetic":
        return SyntheticEditPredictor(downscale=downscale, t_max=t_max)
    raise ValueError(f"unknown builtin predictor {name!r}; expected 'zero' or 'synthetic'")
