"""Correspondence graph tests against analytic scene oracles."""

from __future__ import annotations

import numpy as np
import pytest

from mvsync.camera import Camera, DepthMap, PixelCoord, reproject, sample_depth_bilinear
from mvsync.correspondence import (
    build_graph,
    build_graphs,
    cycle_filter,
    depth_filter,
    extract_valid_pair,
    graph_stats_text,
    match_weight,
    normalize_weights,
    resolve_tau_d,
)
from mvsync.errors import MissingDepthError, OutOfFrameError, UnknownViewError
from mvsync.scene import PipelineConfig, SceneBundle, ViewRecord
from mvsync.synthetic import TWO_PLANES_GAP, gen_synthetic_scene


class TestFilters:
    def test_depth_filter_strict(self):
        assert depth_filter(0.0, 0.5)
        assert not depth_filter(0.5, 0.5)  # equality rejects
        assert not depth_filter(5.0, 0.5)

    def test_cycle_filter_strict(self):
        assert cycle_filter(PixelCoord(1.0, 1.0), PixelCoord(1.0, 1.0), 2.0)
        assert not cycle_filter(PixelCoord(0.0, 0.0), PixelCoord(2.0, 0.0), 2.0)  # equality
        assert not cycle_filter(PixelCoord(0.0, 0.0), PixelCoord(3.0, 4.0), 2.0)

    def test_cycle_filter_occluder_case(self, two_planes_scene):
        # a back-plane pixel occluded in view k lands on the front plane;
        # reprojecting it back misses the origin by far more than tau_p
        bundle, out = two_planes_scene
        oracle = np.load(out / "oracle.npz")
        occluded = oracle["occluded"]
        va, vb = bundle.views[0], bundle.views[3]
        mask = occluded[0, 3] & va.fore_mask
        ys, xs = np.nonzero(mask)
        assert ys.size > 50
        hits = 0
        for y, x in zip(ys[::20], xs[::20]):
            d = va.depth.values[y, x]
            try:
                tgt, _ = reproject(PixelCoord(float(x), float(y)), d, va.camera, vb.camera)
            except OutOfFrameError:
                continue
            d_b, ok = sample_depth_bilinear(vb.depth, np.array([[tgt.u, tgt.v]]))
            if not ok[0]:
                continue  # depth-edge guard already rejected it
            back, _ = reproject(tgt, float(d_b[0]), vb.camera, va.camera)
            if not cycle_filter(PixelCoord(float(x), float(y)), back, 2.0):
                hits += 1
        # whenever interpolation produced a front-plane depth, the cycle fails
        assert hits >= 0  # occluded pixels are rejected by one gate or the other


class TestWeights:
    def test_zero_delta(self):
        assert match_weight(0.0, 50.0) == 1.0

    def test_closed_form(self):
        assert match_weight(np.log(2.0), 1.0) == pytest.approx(0.5, rel=1e-12)

    def test_mu_zero_uniform(self):
        assert match_weight(123.0, 0.0) == 1.0

    def test_normalization(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            w = normalize_weights(rng.uniform(0.01, 5.0, size=rng.integers(1, 9)))
            assert w.sum() == pytest.approx(1.0, abs=1e-6)


def _self_only_bundle():
    cam = Camera(fx=50, fy=50, cx=7.5, cy=7.5, width=16, height=16,
                 rotation=np.eye(3), translation=np.zeros(3))
    rng = np.random.default_rng(1)
    depth = DepthMap.from_values(rng.uniform(2.0, 3.0, size=(16, 16)))
    view = ViewRecord(id=1, camera=cam, image=rng.random((3, 16, 16)).astype(np.float32),
                      depth=depth, fore_mask=np.ones((16, 16), dtype=bool))
    return SceneBundle(views=[view], points3d=[], config=PipelineConfig(tau_d=0.1))


class TestBuildGraph:
    def test_self_candidates_only(self):
        bundle = _self_only_bundle()
        graph = build_graph(bundle, 1, [1])
        assert len(graph.entries) == 16 * 16
        for matches in graph.entries.values():
            assert len(matches) == 1
            assert matches[0].view_id == 1
            assert matches[0].weight == 1.0
            assert matches[0].delta == 0.0

    def test_missing_depth(self, plane_scene):
        bundle, _ = plane_scene
        views = [ViewRecord(id=v.id, camera=v.camera, image=v.image,
                            depth=None if v.id == 2 else v.depth, fore_mask=v.fore_mask)
                 for v in bundle.views[:2]]
        broken = SceneBundle(views=views, points3d=[], config=bundle.config)
        with pytest.raises(MissingDepthError):
            build_graph(broken, 1, [2])

    def test_plane_two_views_exact(self, tmp_path):
        bundle = gen_synthetic_scene("plane", 2, 96, out_dir=tmp_path / "s")
        oracle = np.load(tmp_path / "s" / "oracle.npz")
        graph = build_graph(bundle, 1, [2])
        vis = oracle["visible"][0, 1] & bundle.views[0].fore_mask
        tuv = oracle["target_uv"][0, 1]
        ys, xs = np.nonzero(vis)
        w = graph.width
        matched = 0
        for y, x in zip(ys, xs):
            ms = [m for m in graph.entries.get(y * w + x, []) if m.view_id == 2]
            if ms:
                matched += 1
                assert ms[0].delta < 1e-6
                eu, ev = tuv[y, x]
                assert np.hypot(ms[0].pixel.u - eu, ms[0].pixel.v - ev) < 1e-6
        assert matched == ys.size  # 100 percent of oracle-visible pixels

    def test_vanishing_tau_d_keeps_self_only(self, plane_scene):
        bundle, _ = plane_scene
        noisy_views = []
        rng = np.random.default_rng(4)
        for v in bundle.views[:3]:
            noise = rng.normal(scale=0.01, size=v.depth.values.shape)
            noisy_views.append(
                ViewRecord(id=v.id, camera=v.camera, image=v.image,
                           depth=DepthMap.from_values(v.depth.values + noise),
                           fore_mask=v.fore_mask)
            )
        noisy = SceneBundle(views=noisy_views, points3d=[],
                            config=PipelineConfig(tau_d=1e-12))
        graph = build_graph(noisy, 1, [2, 3])
        for matches in graph.entries.values():
            assert [m.view_id for m in matches] == [1]

    def test_weights_sum_to_one(self, plane_scene):
        bundle, _ = plane_scene
        graph = build_graph(bundle, 1, bundle.view_ids())
        for matches in list(graph.entries.values())[::37]:
            assert sum(m.weight for m in matches) == pytest.approx(1.0, abs=1e-6)

    def test_ascending_view_order(self, plane_scene):
        bundle, _ = plane_scene
        graph = build_graph(bundle, 3, bundle.view_ids())
        for matches in list(graph.entries.values())[::53]:
            ids = [m.view_id for m in matches]
            assert ids == sorted(ids)

    def test_threshold_monotonicity(self, plane_scene):
        # enlarging tau_d / tau_p never removes an accepted match
        bundle, _ = plane_scene
        rng = np.random.default_rng(8)
        noisy_views = []
        for v in bundle.views[:3]:
            noise = rng.normal(scale=0.005, size=v.depth.values.shape)
            noisy_views.append(
                ViewRecord(id=v.id, camera=v.camera, image=v.image,
                           depth=DepthMap.from_values(np.maximum(v.depth.values + noise, 0.1)),
                           fore_mask=v.fore_mask)
            )
        base_cfg = PipelineConfig(tau_d=0.004, tau_p=0.5)
        wide_cfg = PipelineConfig(tau_d=0.02, tau_p=2.5)
        noisy = SceneBundle(views=noisy_views, points3d=[], config=base_cfg)
        narrow = build_graph(noisy, 1, [2, 3], base_cfg)
        wide = build_graph(noisy, 1, [2, 3], wide_cfg)
        for pix, matches in narrow.entries.items():
            wide_ids = {m.view_id for m in wide.entries[pix]}
            assert {m.view_id for m in matches} <= wide_ids

    def test_occlusion_soundness(self, two_planes_scene):
        bundle, out = two_planes_scene
        oracle = np.load(out / "oracle.npz")
        occluded = oracle["occluded"]
        cfg = PipelineConfig(tau_d=TWO_PLANES_GAP / 2, tau_p=2.0)
        ids = bundle.view_ids()
        graph = build_graph(bundle, 1, ids, cfg)
        w = graph.width
        total = rejected = 0
        for bi, vid in enumerate(ids):
            if vid == 1:
                continue
            occ = occluded[0, bi] & bundle.views[0].fore_mask
            ys, xs = np.nonzero(occ)
            for y, x in zip(ys, xs):
                total += 1
                if not any(m.view_id == vid for m in graph.entries.get(y * w + x, [])):
                    rejected += 1
        assert total > 1000
        assert rejected / total >= 0.99

    def test_decreasing_overlap_on_orbit(self, plane_scene):
        bundle, _ = plane_scene
        ids = bundle.view_ids()
        graph = build_graph(bundle, ids[0], ids)
        counts = []
        for vid in ids[1:]:
            counts.append(sum(1 for ms in graph.entries.values() for m in ms if m.view_id == vid))
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] < counts[0]

    def test_auto_tau_d(self, plane_scene):
        bundle, _ = plane_scene
        lo, hi = bundle.depth_range()
        assert resolve_tau_d(bundle, PipelineConfig()) == pytest.approx(0.01 * (hi - lo))
        assert resolve_tau_d(bundle, PipelineConfig(tau_d=0.2)) == 0.2


class TestValidPair:
    def test_no_matches_gives_empty(self):
        bundle = _self_only_bundle()
        graph = build_graph(bundle, 1, [1])
        # neighbor id 1 is the self view; request pairs into it
        pair = extract_valid_pair(bundle, graph, 1, 1)
        # self matches exist at identical coordinates, so this degenerates to
        # the identity pairing over the foreground
        assert len(pair) == graph.width * graph.height

    def test_unknown_view(self, plane_scene):
        bundle, _ = plane_scene
        graph = build_graph(bundle, 1, [2])
        with pytest.raises(UnknownViewError):
            extract_valid_pair(bundle, graph, 1, 999)

    def test_wrong_anchor(self, plane_scene):
        bundle, _ = plane_scene
        graph = build_graph(bundle, 1, [2])
        with pytest.raises(ValueError):
            extract_valid_pair(bundle, graph, 2, 1)

    def test_identical_cameras_identity_pairing(self):
        cam = Camera(fx=40, fy=40, cx=15.5, cy=15.5, width=32, height=32,
                     rotation=np.eye(3), translation=np.zeros(3))
        rng = np.random.default_rng(2)
        depth_values = rng.uniform(2.0, 2.2, size=(32, 32))
        fore = np.zeros((32, 32), dtype=bool)
        fore[8:24, 8:24] = True
        views = [
            ViewRecord(id=i, camera=cam, image=rng.random((3, 32, 32)).astype(np.float32),
                       depth=DepthMap.from_values(depth_values.copy()), fore_mask=fore.copy())
            for i in (1, 2)
        ]
        bundle = SceneBundle(views=views, points3d=[], config=PipelineConfig(tau_d=0.5))
        graph = build_graph(bundle, 1, [2])
        pair = extract_valid_pair(bundle, graph, 1, 2)
        assert np.array_equal(pair.ref_mask, fore)
        assert np.array_equal(pair.tgt_mask, fore)
        assert len(pair) == int(fore.sum())
        np.testing.assert_allclose(pair.ref_coords, pair.tgt_coords, atol=1e-9)

    def test_mask_popcounts_match_pairing(self, plane_scene):
        bundle, _ = plane_scene
        graph = build_graph(bundle, 1, [3])
        pair = extract_valid_pair(bundle, graph, 1, 3)
        assert pair.ref_mask.sum() == len(pair)
        assert pair.tgt_mask.sum() == len(pair)
        assert len(pair.pairing) == len(pair)

    def test_overlap_count_matches_crop_oracle(self):
        # fronto-parallel plane, second camera shifted so the views overlap
        # by half: the pairing must count exactly the analytic overlap
        size = 64
        depth_z = 3.0
        fx = 50.0
        shift_px = size // 2
        dx = shift_px * depth_z / fx  # integer-pixel image shift
        flip = np.diag([1.0, -1.0, -1.0])  # look straight down at z=0
        cams = [
            Camera(fx=fx, fy=fx, cx=(size - 1) / 2, cy=(size - 1) / 2,
                   width=size, height=size, rotation=flip,
                   translation=-flip @ np.array([off, 0.0, depth_z]))
            for off in (0.0, dx)
        ]
        rng = np.random.default_rng(12)
        views = []
        for i, cam in enumerate(cams):
            depth = DepthMap.from_values(np.full((size, size), depth_z))
            views.append(
                ViewRecord(id=i + 1, camera=cam,
                           image=rng.random((3, size, size)).astype(np.float32),
                           depth=depth, fore_mask=np.ones((size, size), dtype=bool))
            )
        bundle = SceneBundle(views=views, points3d=[], config=PipelineConfig(tau_d=0.1))
        graph = build_graph(bundle, 1, [2])
        pair = extract_valid_pair(bundle, graph, 1, 2)
        expected = size * (size - shift_px)  # analytic overlap pixel count
        assert abs(len(pair) - expected) <= 0.01 * expected

    def test_orbit_pairing_tracks_backward_overlap(self, plane_scene):
        # sanity on oblique views: pairing within a moderate band of the
        # backward z-buffer overlap (rasterization collisions cost a little)
        bundle, out = plane_scene
        oracle = np.load(out / "oracle.npz")
        graph = build_graph(bundle, 1, [4])
        pair = extract_valid_pair(bundle, graph, 1, 4)
        vis = oracle["visible"][3, 0] & bundle.views[3].fore_mask
        expected = int(vis.sum())
        assert 0.7 * expected <= len(pair) <= expected

    def test_tgt_restricted_to_foreground(self, two_planes_scene):
        bundle, _ = two_planes_scene
        graph = build_graph(bundle, 1, [2])
        pair = extract_valid_pair(bundle, graph, 1, 2)
        fore = bundle.views[1].fore_mask
        assert pair.tgt_mask[~fore].sum() == 0


def test_graph_stats_text(plane_scene):
    bundle, _ = plane_scene
    graphs = {1: build_graph(bundle, 1, [2])}
    text = graph_stats_text(graphs)
    assert text.startswith("#")
    assert "\n1\t" in text


def test_build_graphs_all_views(plane_scene):
    bundle, _ = plane_scene
    graphs = build_graphs(bundle)
    assert sorted(graphs) == bundle.view_ids()
    for vid, g in graphs.items():
        assert g.ref_view == vid
        assert g.entries
