"""Scan features: deskew, rail pair, voxel planes, edges, matching.

Synthetic clouds are built inline with known geometry, so truth (line
directions, gauge, intersection lines) is available analytically.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from metroloc.errors import (
    AsymmetricRails,
    DegenerateSpread,
    EmptyStream,
    InsufficientImuCoverage,
    NoBedPoints,
    NoRailsFound,
)
from metroloc.features import (
    EdgeConfig,
    LidarScan,
    MatchConfig,
    RailConfig,
    deskew_scan,
    detect_track_bed,
    extract_edges,
    extract_planes,
    extract_rail_tracks,
    fit_infinite_line,
    fit_plane,
    match_lines,
    match_planes,
)
from metroloc.geometry import Rotation, canonicalize_line, so3_exp
from metroloc.imu import GRAVITY, ImuSample, NavState

RNG = np.random.default_rng(11)
RAIL_CFG = RailConfig()


def static_scan(points, labels=None, duration=0.1):
    points = np.asarray(points, dtype=float)
    return LidarScan(
        frame_start=0.0,
        frame_end=duration,
        points=points,
        t_offset=np.zeros(len(points)),
        labels=labels,
    )


def make_tunnel_floor(rng, cfg, n=6000, noise=0.005, x_span=(-2.0, 18.0), half_width=2.7):
    pts = np.column_stack(
        [
            rng.uniform(*x_span, size=n),
            rng.uniform(-half_width, half_width, size=n),
            np.full(n, -cfg.mount_height) + rng.normal(0.0, noise, size=n),
        ]
    )
    return pts


def make_rail(rng, cfg, side, n=800, noise=0.005, x_span=(-1.0, 16.0), radius=None):
    """Rail-head returns along one rail. ``radius`` bends the pair in plan
    view (centerline curvature, left turn)."""
    x = rng.uniform(*x_span, size=n)
    y0 = side * cfg.gauge / 2.0
    if radius is None:
        y = np.full(n, y0)
    else:
        y = y0 + x * x / (2.0 * radius)
    z = -cfg.mount_height + rng.uniform(0.14, 0.16, size=n)
    pts = np.column_stack([x, y + rng.normal(0.0, noise, size=n), z])
    return pts


def make_rail_scene(rng, cfg, radius=None, rail_noise=0.005):
    floor = make_tunnel_floor(rng, cfg)
    left = make_rail(rng, cfg, +1, noise=rail_noise, radius=radius)
    right = make_rail(rng, cfg, -1, noise=rail_noise, radius=radius)
    labels = np.concatenate(
        [np.zeros(len(floor)), np.ones(len(left)), np.full(len(right), 2)]
    ).astype(int)
    return static_scan(np.vstack([floor, left, right]), labels=labels)


class TestFits:
    def test_collinear_points_on_z(self):
        pts = np.column_stack([np.zeros(50), np.zeros(50), np.linspace(-3, 3, 50)])
        feat = fit_infinite_line(pts)
        npt.assert_allclose(feat.line.direction, [0, 0, 1], atol=1e-12)
        assert feat.rms < 1e-12
        assert feat.half_length == pytest.approx(3.0)
        assert feat.support_count == 50

    def test_two_points_exact(self):
        feat = fit_infinite_line(np.array([[1.0, 0.0, 0.0], [1.0, 2.0, 0.0]]))
        npt.assert_allclose(feat.line.direction, [0, 1, 0], atol=1e-12)
        assert feat.line.distance_to([1.0, -7.0, 0.0]) < 1e-12

    def test_noisy_line_direction(self):
        true = canonicalize_line([0.3, -0.2, 0.1], [2.0, 1.0, 0.5])
        s = RNG.uniform(-5, 5, size=1000)
        pts = true.point_at(0)[None, :] + s[:, None] * true.direction[None, :]
        pts = pts + RNG.normal(0, 0.01, size=pts.shape)
        feat = fit_infinite_line(pts)
        ang = np.degrees(np.arccos(min(1.0, abs(feat.line.direction @ true.direction))))
        assert ang < 0.2

    def test_coincident_points_raise(self):
        with pytest.raises(DegenerateSpread):
            fit_infinite_line(np.ones((5, 3)))

    def test_plane_on_z0(self):
        pts = np.column_stack([RNG.uniform(-1, 1, 100), RNG.uniform(-1, 1, 100), np.zeros(100)])
        feat = fit_plane(pts)
        npt.assert_allclose(feat.plane.normal, [0, 0, 1], atol=1e-9)
        assert abs(feat.plane.distance) < 1e-12
        assert feat.planarity < 1e-12

    def test_plane_through_unit_axes(self):
        feat = fit_plane(np.eye(3))
        s = 1.0 / math.sqrt(3.0)
        # x + y + z = 1 normalizes to d < 0 flipped: n = -(1,1,1)/sqrt3, d = +1/sqrt3
        npt.assert_allclose(feat.plane.normal, [-s, -s, -s], atol=1e-12)
        assert feat.plane.distance == pytest.approx(s)
        npt.assert_allclose(feat.plane.signed_distance(np.eye(3)), 0.0, atol=1e-12)

    def test_noisy_plane_normal(self):
        n_true = np.array([1.0, 2.0, 3.0]) / math.sqrt(14.0)
        basis = np.linalg.svd(n_true[None, :])[2][1:]
        coeff = RNG.uniform(-3, 3, size=(500, 2))
        pts = coeff @ basis + n_true * 1.5 + RNG.normal(0, 0.01, size=(500, 3))
        feat = fit_plane(pts)
        ang = np.degrees(np.arccos(min(1.0, abs(feat.plane.normal @ n_true))))
        assert ang < 0.5

    def test_collinear_plane_raises(self):
        pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
        with pytest.raises(DegenerateSpread):
            fit_plane(pts)


class TestDeskew:
    def _imu(self, ts, accel, gyro):
        return [ImuSample(t, np.asarray(accel, float), np.asarray(gyro, float)) for t in ts]

    def test_zero_motion_is_identity(self):
        pts = RNG.uniform(-10, 10, size=(100, 3))
        scan = LidarScan(0.0, 0.1, pts, RNG.uniform(0, 0.1, size=100))
        state = NavState(0.0, np.zeros(3), np.zeros(3), Rotation.identity())
        samples = self._imu(np.arange(0, 0.111, 0.005), GRAVITY, [0, 0, 0])
        out = deskew_scan(scan, state, samples)
        npt.assert_allclose(out.points, pts, atol=1e-9)
        npt.assert_allclose(out.t_offset, 0.1, atol=1e-12)

    def test_constant_forward_motion_shift(self):
        # 10 m/s, 0.05 s sweep: a mid-sweep point ends up 0.25 m behind
        pts = np.array([[5.0, 1.0, -0.5]])
        scan = LidarScan(0.0, 0.05, pts, np.array([0.025]))
        state = NavState(0.0, np.zeros(3), np.array([10.0, 0.0, 0.0]), Rotation.identity())
        samples = self._imu(np.arange(0, 0.0551, 0.005), GRAVITY, [0, 0, 0])
        out = deskew_scan(scan, state, samples)
        npt.assert_allclose(out.points[0], [5.0 - 0.25, 1.0, -0.5], atol=1e-6)

    def test_pure_yaw_matches_pose_oracle(self):
        rate = 1.0  # rad/s about z; specific force stays (0,0,g)
        rng = np.random.default_rng(3)
        n = 200
        t_off = rng.uniform(0.0, 0.1, size=n)
        ranges = rng.uniform(5.0, 30.0, size=n)
        az = rng.uniform(-0.5, 0.5, size=n)
        world = np.column_stack(
            [ranges * np.cos(az), ranges * np.sin(az), rng.uniform(-1, 2, size=n)]
        )
        # sensor yaws in place: the point observed at t is the world point
        # expressed in the pose at t
        local = np.stack(
            [so3_exp([0, 0, rate * t]).inverse().apply(w) for t, w in zip(t_off, world)]
        )
        scan = LidarScan(0.0, 0.1, local, t_off)
        state = NavState(0.0, np.zeros(3), np.zeros(3), Rotation.identity())
        samples = self._imu(np.arange(0, 0.1001, 0.0025), GRAVITY, [0, 0, rate])
        out = deskew_scan(scan, state, samples)
        expected = np.stack([so3_exp([0, 0, rate * 0.1]).inverse().apply(w) for w in world])
        npt.assert_allclose(out.points, expected, atol=1e-5)

    def test_missing_coverage_raises(self):
        pts = np.zeros((5, 3)) + [1.0, 0, 0]
        scan = LidarScan(0.0, 0.1, pts, np.full(5, 0.05))
        state = NavState(0.0, np.zeros(3), np.zeros(3), Rotation.identity())
        short = self._imu(np.arange(0, 0.05, 0.005), GRAVITY, [0, 0, 0])
        with pytest.raises(InsufficientImuCoverage):
            deskew_scan(scan, state, short)


class TestTrackBed:
    def test_band_selects_exactly_bed(self):
        cfg = RailConfig(mount_height=1.5)
        rng = np.random.default_rng(5)
        bed = make_tunnel_floor(rng, cfg, n=500, noise=0.01)
        wall = np.column_stack(
            [rng.uniform(0, 10, 300), np.full(300, 2.7), rng.uniform(-1.0, 2.0, 300)]
        )
        scan = static_scan(np.vstack([bed, wall]))
        idx, feat = detect_track_bed(scan, cfg)
        assert set(idx) == set(range(500))
        npt.assert_allclose(abs(feat.plane.normal[2]), 1.0, atol=1e-3)

    def test_empty_region_raises(self):
        scan = static_scan(RNG.uniform(0, 1, size=(200, 3)))  # nothing near -1 m
        with pytest.raises(NoBedPoints):
            detect_track_bed(scan, RAIL_CFG)

    def test_cross_slope_normal(self):
        cfg = RailConfig()
        rng = np.random.default_rng(6)
        slope = math.radians(2.0)
        n = 2000
        x = rng.uniform(-2, 15, n)
        y = rng.uniform(-2.5, 2.5, n)
        z = -cfg.mount_height + y * math.tan(slope) + rng.normal(0, 0.003, n)
        scan = static_scan(np.column_stack([x, y, z]))
        _, feat = detect_track_bed(scan, cfg)
        n_true = np.array([0.0, -math.sin(slope), math.cos(slope)])
        ang = np.degrees(np.arccos(min(1.0, abs(feat.plane.normal @ n_true))))
        assert ang < 0.5


class TestRails:
    def test_straight_rails_recovered(self):
        rng = np.random.default_rng(2)
        scan = make_rail_scene(rng, RAIL_CFG)
        left, right = extract_rail_tracks(scan, RAIL_CFG)
        for feat, side in ((left, +1), (right, -1)):
            ang = np.degrees(np.arccos(min(1.0, abs(feat.line.direction @ np.array([1.0, 0, 0])))))
            assert ang < 0.5
            assert abs(feat.centroid[1] - side * RAIL_CFG.gauge / 2) < 0.05
            assert feat.kind == "rail"
        # recovered gauge from the two closest points, perpendicular to the track
        d = left.line.direction
        dc = left.line.closest_point - right.line.closest_point
        gauge = np.linalg.norm(dc - (dc @ d) * d)
        assert abs(gauge - RAIL_CFG.gauge) < 0.02

    def test_support_recall_on_true_rail_points(self):
        # >= 95% of the labeled rail returns within the window end up in support
        rng = np.random.default_rng(4)
        scan = make_rail_scene(rng, RAIL_CFG)
        left, right = extract_rail_tracks(scan, RAIL_CFG)
        got = set(left.indices.tolist()) | set(right.indices.tolist())
        true_rail = np.nonzero(
            (scan.labels > 0) & (scan.points[:, 0] <= RAIL_CFG.max_track_len)
        )[0]
        recall = len(got & set(true_rail.tolist())) / len(true_rail)
        assert recall >= 0.95

    def test_determinism_under_fixed_seed(self):
        rng = np.random.default_rng(9)
        scan = make_rail_scene(rng, RAIL_CFG)
        l1, r1 = extract_rail_tracks(scan, RAIL_CFG)
        l2, r2 = extract_rail_tracks(scan, RAIL_CFG)
        npt.assert_array_equal(l1.indices, l2.indices)
        npt.assert_array_equal(r1.indices, r2.indices)
        npt.assert_allclose(l1.line.rotation.quat, l2.line.rotation.quat, atol=0)

    def test_bed_only_raises(self):
        rng = np.random.default_rng(7)
        scan = static_scan(make_tunnel_floor(rng, RAIL_CFG))
        with pytest.raises(NoRailsFound):
            extract_rail_tracks(scan, RAIL_CFG)

    def test_gentle_curve_succeeds(self):
        rng = np.random.default_rng(8)
        scan = make_rail_scene(rng, RAIL_CFG, radius=800.0)
        left, right = extract_rail_tracks(scan, RAIL_CFG)
        assert left.support_count >= RAIL_CFG.min_inliers
        assert right.support_count >= RAIL_CFG.min_inliers

    def test_tight_curve_fails(self):
        rng = np.random.default_rng(8)
        scan = make_rail_scene(rng, RAIL_CFG, radius=250.0)
        with pytest.raises((NoRailsFound, AsymmetricRails)):
            extract_rail_tracks(scan, RAIL_CFG)

    def test_gauge_mismatch_raises(self):
        # rails laid 20 cm too wide
        rng = np.random.default_rng(10)
        cfg_wide = RailConfig(gauge=RAIL_CFG.gauge + 0.2)
        floor = make_tunnel_floor(rng, RAIL_CFG)
        left = make_rail(rng, cfg_wide, +1)
        right = make_rail(rng, cfg_wide, -1)
        scan = static_scan(np.vstack([floor, left, right]))
        with pytest.raises((AsymmetricRails, NoRailsFound)):
            extract_rail_tracks(scan, RAIL_CFG)


def make_corner(rng, n=4000, noise=0.0):
    """Two walls meeting along the vertical line x=4, y=1."""
    w1 = np.column_stack(
        [np.full(n, 4.0), rng.uniform(1.0, 6.0, n), rng.uniform(-1.0, 3.0, n)]
    )  # x = 4 plane
    w2 = np.column_stack(
        [rng.uniform(-1.0, 4.0, n), np.full(n, 1.0), rng.uniform(-1.0, 3.0, n)]
    )  # y = 1 plane
    pts = np.vstack([w1, w2])
    if noise:
        pts = pts + rng.normal(0, noise, pts.shape)
    return static_scan(pts)


class TestEdges:
    def test_corner_intersection_line(self):
        scan = make_corner(np.random.default_rng(3))
        edges = extract_edges(scan, EdgeConfig())
        assert len(edges) == 1
        e = edges[0]
        ang = np.degrees(np.arccos(min(1.0, abs(e.line.direction @ np.array([0.0, 0, 1.0])))))
        assert ang < 1.0
        # the true edge passes through (4, 1, z)
        assert e.line.distance_to([4.0, 1.0, 0.0]) < 0.02

    def test_noisy_corner(self):
        scan = make_corner(np.random.default_rng(12), noise=0.01)
        edges = extract_edges(scan, EdgeConfig())
        assert len(edges) >= 1
        best = min(edges, key=lambda e: e.line.distance_to([4.0, 1.0, 0.0]))
        ang = np.degrees(
            np.arccos(min(1.0, abs(best.line.direction @ np.array([0.0, 0, 1.0]))))
        )
        assert ang < 1.0

    def test_single_plane_no_edges(self):
        rng = np.random.default_rng(13)
        pts = np.column_stack(
            [rng.uniform(0, 8, 3000), rng.uniform(0, 8, 3000), np.zeros(3000)]
        )
        assert extract_edges(static_scan(pts), EdgeConfig()) == []


class TestPlanes:
    def test_two_walls_two_planes(self):
        scan = make_corner(np.random.default_rng(14), noise=0.003)
        feats = extract_planes(scan, EdgeConfig())
        assert len(feats) == 2
        normals = sorted(np.round(np.abs(f.plane.normal), 2).tolist() for f in feats)
        npt.assert_allclose(normals[0], [0, 1, 0], atol=0.05)
        npt.assert_allclose(normals[1], [1, 0, 0], atol=0.05)
        for f in feats:
            assert f.support_count <= EdgeConfig().max_plane_support
            assert f.planarity < EdgeConfig().planarity_max

    def test_support_cap(self):
        rng = np.random.default_rng(15)
        pts = np.column_stack(
            [rng.uniform(0, 20, 60000), rng.uniform(0, 6, 60000), rng.normal(0, 0.002, 60000)]
        )
        feats = extract_planes(static_scan(pts), EdgeConfig())
        assert len(feats) == 1
        assert feats[0].support_count <= EdgeConfig().max_plane_support


def _line_feat_at(center, direction, kind="edge"):
    pts = np.asarray(center, float)[None, :] + np.linspace(-1, 1, 30)[:, None] * np.asarray(
        direction, float
    )[None, :]
    return fit_infinite_line(pts, kind=kind)


class TestMatching:
    def test_identity_sets(self):
        feats = [
            _line_feat_at([0, 0, 0], [1, 0, 0]),
            _line_feat_at([5, 2, 0], [0, 1, 0]),
            _line_feat_at([2, -3, 1], [0, 0, 1]),
        ]
        assert match_lines(feats, feats) == [(0, 0), (1, 1), (2, 2)]

    def test_angle_gate(self):
        a = [_line_feat_at([0, 0, 0], [1, 0, 0])]
        rot15 = so3_exp([0, 0, math.radians(15.0)])
        b = [_line_feat_at([0, 0, 0], rot15.apply([1, 0, 0]))]
        assert match_lines(a, b) == []
        rot5 = so3_exp([0, 0, math.radians(5.0)])
        c = [_line_feat_at([0.4, 0, 0], rot5.apply([1, 0, 0]))]
        assert match_lines(a, c) == [(0, 0)]

    def test_distance_gate_and_tiebreak(self):
        a = [_line_feat_at([0, 0, 0], [1, 0, 0])]
        b = [
            _line_feat_at([0, 0.45, 0], [1, 0, 0]),
            _line_feat_at([0, 0.10, 0], [1, 0, 0]),
        ]
        # both admissible; the closer one (index 1) wins the greedy pick
        assert match_lines(a, b) == [(0, 1)]
        far = [_line_feat_at([0, 0.6, 0], [1, 0, 0])]
        assert match_lines(a, far) == []

    def test_matching_symmetry(self):
        rng = np.random.default_rng(16)
        feats_a = [
            _line_feat_at(rng.uniform(-5, 5, 3), rng.normal(size=3)) for _ in range(6)
        ]
        feats_b = [
            _line_feat_at(f.centroid + rng.normal(0, 0.05, 3), f.line.direction)
            for f in feats_a
        ]
        ab = match_lines(feats_a, feats_b)
        ba = match_lines(feats_b, feats_a)
        assert sorted((j, i) for i, j in ab) == sorted(ba)

    def test_plane_gates(self):
        def plane_feat(normal, d):
            n = np.asarray(normal, float)
            n = n / np.linalg.norm(n)
            basis = np.linalg.svd(n[None, :])[2][1:]
            coeff = RNG.uniform(-1, 1, size=(40, 2))
            pts = coeff @ basis - d * n
            return fit_plane(pts)

        a = [plane_feat([0, 0, 1], 1.0)]
        rot6 = so3_exp([math.radians(6.0), 0, 0])
        assert match_planes(a, [plane_feat(rot6.apply([0, 0, 1]), 1.0)]) == []
        rot2 = so3_exp([math.radians(2.0), 0, 0])
        assert match_planes(a, [plane_feat(rot2.apply([0, 0, 1]), 1.2)]) == [(0, 0)]
        assert match_planes(a, [plane_feat([0, 0, 1], 1.3)]) == []

    def test_empty_inputs(self):
        assert match_lines([], []) == []
        assert match_planes([], [_line_feat_at([0, 0, 0], [1, 0, 0])] and []) == []


class TestScanType:
    def test_empty_scan_raises(self):
        with pytest.raises(EmptyStream):
            LidarScan(0.0, 0.1, np.zeros((0, 3)), np.zeros(0))

    def test_backwards_sweep_raises(self):
        with pytest.raises(ValueError):
            LidarScan(0.2, 0.1, np.zeros((3, 3)), np.zeros(3))
