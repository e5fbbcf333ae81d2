"""Shared fixtures: session-scoped synthetic scenes with oracle sidecars."""

from __future__ import annotations

import numpy as np
import pytest

from mvsync.synthetic import gen_synthetic_scene


@pytest.fixture(scope="session")
def plane_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("plane_scene")
    bundle = gen_synthetic_scene("plane", 8, 128, out_dir=out)
    return bundle, out


@pytest.fixture(scope="session")
def two_planes_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("two_planes_scene")
    bundle = gen_synthetic_scene("two_planes", 6, 128, out_dir=out)
    return bundle, out


@pytest.fixture(scope="session")
def cube_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cube_scene")
    bundle = gen_synthetic_scene("cube", 8, 96, out_dir=out)
    return bundle, out


def bilinear_reference(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Independent bilinear sampler used by warp oracles in tests."""
    h, w = image.shape[1:]
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, w - 1.0)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u), w - 2).astype(int)
    y0 = np.minimum(np.floor(v), h - 2).astype(int)
    fx = u - x0
    fy = v - y0
    img = image.astype(np.float64)
    return (
        img[:, y0, x0] * (1 - fx) * (1 - fy)
        + img[:, y0, x0 + 1] * fx * (1 - fy)
        + img[:, y0 + 1, x0] * (1 - fx) * fy
        + img[:, y0 + 1, x0 + 1] * fx * fy
    )
