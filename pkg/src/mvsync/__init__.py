"""mvsync: geometry-verified multi-view consistency engine for scene editing.

Builds dense cross-view correspondences gated by reprojected-depth and
cycle-consistency checks, synchronizes per-view denoising through weighted
noise and feature aggregation under masked guidance, propagates anchor-view
pixels to neighbors by exact backward warping, and bakes the edited views
into a colored point set to measure cross-view consistency.
"""

from .camera import Camera, DepthMap, PixelCoord
from .scene import Keypoint3D, PipelineConfig, SceneBundle, ViewRecord

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "DepthMap",
    "PixelCoord",
    "Keypoint3D",
    "PipelineConfig",
    "SceneBundle",
    "ViewRecord",
    "__version__",
]
