"""Pinhole model unit tests: hand-computed projections and inverse laws."""

from __future__ import annotations

import numpy as np
import pytest

from mvsync.camera import (
    Camera,
    DepthMap,
    PixelCoord,
    backproject,
    backproject_many,
    nearest_pixel,
    project,
    project_many,
    reproject,
    sample_depth,
    sample_depth_bilinear,
)
from mvsync.errors import BehindCameraError, InvalidDepthError, OutOfFrameError


def identity_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101) -> Camera:
    return Camera(
        fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
        rotation=np.eye(3), translation=np.zeros(3),
    )


class TestProject:
    def test_principal_axis(self):
        cam = identity_camera()
        pix, depth = project(cam, [0.0, 0.0, 2.0])
        assert pix == PixelCoord(50.0, 50.0)
        assert depth == 2.0

    def test_analytic_offset(self):
        # u = fx * x/z + cx = 100 * 0.5 + 50 = 100
        cam = identity_camera()
        pix, depth = project(cam, [1.0, 0.0, 2.0])
        assert pix.u == pytest.approx(100.0, abs=1e-12)
        assert pix.v == pytest.approx(50.0, abs=1e-12)
        assert depth == 2.0

    def test_behind_camera(self):
        cam = identity_camera()
        with pytest.raises(BehindCameraError):
            project(cam, [0.0, 0.0, -1.0])

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            identity_camera(fx=-1.0)
        bad_rot = np.eye(3)
        bad_rot[0, 0] = 1.1
        with pytest.raises(ValueError):
            Camera(fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                   rotation=bad_rot, translation=np.zeros(3))
        # reflection: orthonormal but det -1
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Camera(fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                   rotation=refl, translation=np.zeros(3))


class TestBackproject:
    def test_principal_axis(self):
        cam = identity_camera()
        point = backproject(cam, PixelCoord(50.0, 50.0), 3.0)
        np.testing.assert_allclose(point, [0.0, 0.0, 3.0], atol=1e-12)

    def test_invalid_depth(self):
        cam = identity_camera()
        with pytest.raises(InvalidDepthError):
            backproject(cam, PixelCoord(50.0, 50.0), 0.0)

    def test_inverse_property_random(self):
        # project(backproject) == identity for 10^4 random valid samples
        rng = np.random.default_rng(42)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = 0.7
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rot = np.eye(3) * np.cos(angle) + np.sin(angle) * k + (1 - np.cos(angle)) * np.outer(axis, axis)
        cam = Camera(fx=120.0, fy=95.0, cx=63.5, cy=47.5, width=128, height=96,
                     rotation=rot, translation=np.array([0.3, -0.2, 1.1]))
        n = 10_000
        points = rng.uniform(-2.0, 2.0, size=(n, 3))
        points[:, 2] = rng.uniform(2.0, 8.0, size=n)
        points = cam.camera_to_world(points)  # guarantee positive depth
        uv, z = project_many(cam, points)
        back = backproject_many(cam, uv, z)
        rel = np.abs(back - points).max(axis=1) / np.abs(points).max(axis=1)
        assert rel.max() < 1e-9


class TestReproject:
    def test_identity_transform(self):
        cam = identity_camera()
        pix, depth = reproject(PixelCoord(40.0, 60.0), 2.5, cam, cam)
        assert pix.u == pytest.approx(40.0, abs=1e-9)
        assert pix.v == pytest.approx(60.0, abs=1e-9)
        assert depth == pytest.approx(2.5, abs=1e-12)

    def test_translated_camera_depth(self):
        # cam_k shifted -1 along the optical axis: depth 2 becomes 3
        cam_ref = identity_camera()
        cam_k = Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101,
                       rotation=np.eye(3), translation=np.array([0.0, 0.0, 1.0]))
        _, depth = reproject(PixelCoord(50.0, 50.0), 2.0, cam_ref, cam_k)
        assert depth == pytest.approx(3.0, abs=1e-12)

    def test_out_of_frame(self):
        cam_ref = identity_camera()
        # push the target camera sideways so the point exits the frame
        cam_k = Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101,
                       rotation=np.eye(3), translation=np.array([5.0, 0.0, 0.0]))
        with pytest.raises(OutOfFrameError):
            reproject(PixelCoord(10.0, 50.0), 2.0, cam_ref, cam_k)

    def test_roundtrip_on_exact_scene(self, plane_scene):
        bundle, _ = plane_scene
        va, vb = bundle.views[0], bundle.views[2]
        ys, xs = np.nonzero(va.fore_mask)
        rng = np.random.default_rng(3)
        sel = rng.choice(ys.size, size=200, replace=False)
        for i in sel[:50]:
            u, v = float(xs[i]), float(ys[i])
            d = va.depth.values[ys[i], xs[i]]
            try:
                tgt, _ = reproject(PixelCoord(u, v), d, va.camera, vb.camera)
            except OutOfFrameError:
                continue
            d_b, ok = sample_depth_bilinear(vb.depth, np.array([[tgt.u, tgt.v]]))
            if not ok[0]:
                continue
            back, _ = reproject(tgt, float(d_b[0]), vb.camera, va.camera)
            assert np.hypot(back.u - u, back.v - v) < 1e-6

    def test_reprojected_depth_positive(self, plane_scene):
        bundle, _ = plane_scene
        va, vb = bundle.views[0], bundle.views[1]
        ys, xs = np.nonzero(va.fore_mask)
        for i in range(0, ys.size, 997):
            d = va.depth.values[ys[i], xs[i]]
            try:
                _, depth = reproject(PixelCoord(float(xs[i]), float(ys[i])), d, va.camera, vb.camera)
            except (OutOfFrameError, BehindCameraError):
                continue
            assert depth > 0


class TestSampleDepth:
    def test_nearest_rounding(self):
        dm = DepthMap.from_values(np.array([[1.0, 2.0], [3.0, 4.0]]))
        value, valid = sample_depth(dm, PixelCoord(0.4, 0.4))
        assert value == 1.0 and valid

    def test_invalid_flag(self):
        dm = DepthMap.from_values(np.array([[0.0, 2.0], [3.0, 4.0]]))
        value, valid = sample_depth(dm, PixelCoord(0.0, 0.0))
        assert not valid

    def test_out_of_frame(self):
        dm = DepthMap.from_values(np.ones((2, 2)))
        with pytest.raises(OutOfFrameError):
            sample_depth(dm, PixelCoord(-1.0, 0.0))

    def test_nearest_pixel_half_up(self):
        assert nearest_pixel(0.4, 0.4) == (0, 0)
        assert nearest_pixel(0.5, 1.5) == (1, 2)


class TestDepthMap:
    def test_valid_requires_positive(self):
        with pytest.raises(ValueError):
            DepthMap(values=np.array([[0.0]]), valid=np.array([[True]]))

    def test_from_values_marks_nonpositive(self):
        dm = DepthMap.from_values(np.array([[1.0, -2.0], [0.0, np.nan]]))
        assert dm.valid.tolist() == [[True, False], [False, False]]


class TestBilinearDepth:
    def test_exact_at_integer_coords(self):
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        dm = DepthMap.from_values(values)
        d, ok = sample_depth_bilinear(dm, np.array([[1.0, 1.0], [0.0, 0.0]]))
        assert ok.all()
        np.testing.assert_allclose(d, [4.0, 1.0], rtol=1e-15)

    def test_invalid_corner_blocks(self):
        values = np.array([[1.0, 0.0], [1.0, 1.0]])
        dm = DepthMap.from_values(values)
        _, ok = sample_depth_bilinear(dm, np.array([[0.5, 0.0]]))
        assert not ok[0]
        # zero-weight corners do not participate
        _, ok2 = sample_depth_bilinear(dm, np.array([[0.0, 0.5]]))
        assert ok2[0]

    def test_depth_edge_rejected(self):
        values = np.array([[1.0, 2.0], [1.0, 2.0]])  # ratio 2 > 1.2
        dm = DepthMap.from_values(values)
        _, ok = sample_depth_bilinear(dm, np.array([[0.5, 0.5]]))
        assert not ok[0]

    def test_out_of_domain(self):
        dm = DepthMap.from_values(np.ones((4, 4)))
        _, ok = sample_depth_bilinear(dm, np.array([[-0.1, 1.0], [3.2, 1.0]]))
        assert not ok.any()

    def test_planar_exactness(self, plane_scene):
        # inverse depth is affine on a plane, so interpolation is exact
        bundle, _ = plane_scene
        view = bundle.views[0]
        rng = np.random.default_rng(11)
        uv = rng.uniform(10.0, 100.0, size=(500, 2))
        d, ok = sample_depth_bilinear(view.depth, uv)
        assert ok.all()
        # reference: intersect the pixel ray with the plane z=0
        cam = view.camera
        dir_cam = np.stack(
            [(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))], axis=1
        )
        dir_world = dir_cam @ cam.rotation
        origin = cam.center
        s = -origin[2] / dir_world[:, 2]
        np.testing.assert_allclose(d, s, rtol=1e-10)
