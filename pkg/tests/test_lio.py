"""Scan-to-map alignment tests.

Scene landmarks are written down in closed form, and the scan-side features
are the same landmarks pulled back through the true pose, so every expected
answer is exact.
"""

import numpy as np
import pytest

from metroloc.errors import InsufficientCorrespondences
from metroloc.features import LineFeature, PlaneFeature
from metroloc.geometry import (
    Plane,
    RigidTransform,
    Rotation,
    canonicalize_line,
    pose_retract,
    so3_exp,
    transform_line,
    transform_plane,
)
from metroloc.imu import (
    ImuBias,
    ImuNoiseConfig,
    ImuSample,
    NavState,
    preintegrate,
    propagate_state,
)
from metroloc.lio import (
    LioConfig,
    LocalFeatureMap,
    _plane_jacobian,
    line_to_line_residual,
    plane_to_plane_residual,
    point_to_plane_residual,
    solve_lio,
    transform_line_feature,
    transform_plane_feature,
)

ZERO_BIAS = ImuBias(np.zeros(3), np.zeros(3))

PRIOR_COV = np.diag([0.25, 0.25, 0.25] + [np.radians(3.0) ** 2] * 3)


def line_feature(point, direction, kind="edge", half=3.0, n=25):
    line = canonicalize_line(np.asarray(point, dtype=float),
                             np.asarray(direction, dtype=float))
    s = np.linspace(-half, half, n)
    pts = line.closest_point + s[:, None] * line.direction
    return LineFeature(line=line, centroid=pts.mean(axis=0), half_length=half,
                       kind=kind, rms=0.0, support_count=n, points=pts)


def plane_feature(center, normal, extent=2.0, n=80, seed=0):
    rng = np.random.default_rng(seed)
    unit = np.asarray(normal, dtype=float)
    unit = unit / np.linalg.norm(unit)
    u = np.cross(unit, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(unit, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(unit, u)
    ab = rng.uniform(-extent, extent, size=(n, 2))
    pts = np.asarray(center, dtype=float) + ab[:, :1] * u + ab[:, 1:] * v
    plane = Plane.from_point_normal(np.asarray(center, dtype=float), unit)
    return PlaneFeature(plane=plane, centroid=pts.mean(axis=0), planarity=0.0,
                        rms=0.0, support_count=n, points=pts)


def scene_lines():
    return [
        line_feature((0.0, -2.0, 1.0), (1.0, 0.0, 0.0)),
        line_feature((3.0, 0.0, 2.0), (0.0, 1.0, 0.0)),
    ]


def scene_planes():
    # keep the planes at a standoff so the body origin never crosses them:
    # the canonical d >= 0 gauge flips the stored normal at a side change,
    # which (correctly) defeats signed-normal association
    return [
        plane_feature((5.0, 0.0, -1.5), (0.0, 0.0, 1.0), seed=1),
        plane_feature((5.0, 2.7, 0.0), (0.0, 1.0, 0.0), seed=2),
    ]


def build_map(lines, planes):
    fmap = LocalFeatureMap(capacity=10)
    fmap.add_keyframe(RigidTransform.identity(), lines, planes)
    return fmap


def scan_view(truth, lines, planes):
    inv = truth.inverse()
    return ([transform_line_feature(inv, f) for f in lines],
            [transform_plane_feature(inv, f) for f in planes])


def nav_at(pose, stamp=0.0, vel=(0.0, 0.0, 0.0)):
    return NavState(stamp, pose.translation.copy(), np.asarray(vel, dtype=float),
                    pose.rotation, ZERO_BIAS)


def solve_scene(truth, pred, lines=None, planes=None, **kw):
    lines = scene_lines() if lines is None else lines
    planes = scene_planes() if planes is None else planes
    fmap = build_map(lines, planes)
    scan_lines, scan_planes = scan_view(truth, lines, planes)
    return solve_lio(scan_lines, scan_planes, fmap, nav_at(pred), PRIOR_COV, **kw)


class TestResidualOps:
    def test_line_self_consistency(self):
        T = RigidTransform(so3_exp(np.array([0.2, -0.1, 0.3])),
                           np.array([1.0, -2.0, 0.5]))
        line = canonicalize_line(np.array([1.0, 2.0, 3.0]),
                                 np.array([0.3, 1.0, -0.2]))
        r = line_to_line_residual(T, line, transform_line(T, line))
        assert np.linalg.norm(r) < 1e-9

    def test_point_to_plane_identity_pose(self):
        plane = Plane.from_normal_distance(np.array([0.0, 0.0, 1.0]), 0.0)
        r = point_to_plane_residual(RigidTransform.identity(),
                                    np.array([1.0, 2.0, 3.0]), plane)
        assert r == pytest.approx(3.0, abs=1e-12)

    def test_point_to_plane_lifted_plane(self):
        base = Plane.from_normal_distance(np.array([0.0, 0.0, 1.0]), 0.0)
        lift = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, 2.0]))
        lifted = transform_plane(lift, base)
        r = point_to_plane_residual(RigidTransform.identity(), np.zeros(3), lifted)
        assert r == pytest.approx(2.0, abs=1e-12)

    def test_point_to_plane_respects_pose(self):
        plane = Plane.from_normal_distance(np.array([0.0, 0.0, 1.0]), 0.0)
        T = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, 1.5]))
        r = point_to_plane_residual(T, np.zeros(3), plane)
        assert r == pytest.approx(1.5, abs=1e-12)

    def test_plane_to_plane_single_point_one_metre_off(self):
        plane = Plane.from_normal_distance(np.array([0.0, 0.0, 1.0]), 0.0)
        total = plane_to_plane_residual(RigidTransform.identity(),
                                        [(np.array([[0.0, 0.0, 1.0]]), plane)])
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_plane_to_plane_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        T = RigidTransform(so3_exp(rng.normal(size=3) * 0.2), rng.normal(size=3))
        corr = []
        for seed in range(2):
            pts = rng.normal(size=(4, 3))
            normal = rng.normal(size=3)
            plane = Plane.from_point_normal(rng.normal(size=3), normal)
            corr.append((pts, plane))
        expected = 0.0
        for pts, plane in corr:
            for p in pts:
                expected += point_to_plane_residual(T, p, plane) ** 2
        assert plane_to_plane_residual(T, corr) == pytest.approx(expected, rel=1e-12)


class TestLocalFeatureMap:
    def test_features_stored_in_world_frame(self):
        fmap = LocalFeatureMap(capacity=4)
        pose = RigidTransform(Rotation.identity(), np.array([1.0, 0.0, 2.0]))
        body_line = line_feature((0.0, 0.0, 0.0), (0.0, 1.0, 0.0))
        body_plane = plane_feature((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
        fmap.add_keyframe(pose, [body_line], [body_plane])
        assert fmap.lines[0].line.distance_to(np.array([1.0, 5.0, 2.0])) < 1e-12
        assert abs(fmap.planes[0].plane.signed_distance(np.array([3.0, 3.0, 2.0]))) < 1e-12

    def test_fifo_eviction(self):
        fmap = LocalFeatureMap(capacity=2)
        for k in range(3):
            fmap.add_keyframe(RigidTransform.identity(),
                              [line_feature((0.0, float(k), 0.0), (1.0, 0.0, 0.0))],
                              [])
        assert len(fmap) == 2
        ys = sorted(f.line.closest_point[1] for f in fmap.lines)
        assert ys == [1.0, 2.0]

    def test_needs_keyframe_gates(self):
        fmap = LocalFeatureMap(capacity=4)
        assert fmap.needs_keyframe(RigidTransform.identity())
        fmap.add_keyframe(RigidTransform.identity(), [], [])
        near = RigidTransform(Rotation.identity(), np.array([0.5, 0.0, 0.0]))
        far = RigidTransform(Rotation.identity(), np.array([1.5, 0.0, 0.0]))
        turned = RigidTransform(so3_exp(np.array([0.0, 0.0, np.radians(6.0)])),
                                np.zeros(3))
        slight = RigidTransform(so3_exp(np.array([0.0, 0.0, np.radians(4.0)])),
                                np.array([0.9, 0.0, 0.0]))
        assert not fmap.needs_keyframe(near)
        assert fmap.needs_keyframe(far)
        assert fmap.needs_keyframe(turned)
        assert not fmap.needs_keyframe(slight)


class TestSolveLio:
    def test_fixed_point(self):
        truth = RigidTransform.identity()
        sol = solve_scene(truth, truth)
        assert np.linalg.norm(sol.pose.translation) < 1e-6
        assert sol.pose.rotation.angle_to(truth.rotation) < 1e-6
        assert sol.residual_rms < 1e-6
        assert not sol.degenerate

    def test_half_metre_forward(self):
        truth = RigidTransform(Rotation.identity(), np.array([0.5, 0.0, 0.0]))
        pred = RigidTransform(so3_exp(np.radians([0.0, 0.0, 1.0])),
                              np.array([0.42, 0.06, -0.05]))
        sol = solve_scene(truth, pred)
        assert np.linalg.norm(sol.pose.translation - truth.translation) < 1e-3
        assert np.degrees(sol.pose.rotation.angle_to(truth.rotation)) < 0.01

    def test_exact_recovery_two_lines_one_plane(self):
        # near-uninformative prior: the feature geometry alone must pin the pose
        weak = np.eye(6) * 1e4
        lines = scene_lines()
        planes = [plane_feature((5.0, 0.0, -1.5), (0.0, 0.0, 1.0), seed=3)]
        truth = RigidTransform(so3_exp(np.array([0.01, -0.02, 0.03])),
                               np.array([0.3, -0.2, 0.1]))
        pred = RigidTransform(truth.rotation @ so3_exp(np.radians([1.0, -2.0, 1.5])),
                              truth.translation + np.array([0.2, 0.15, -0.1]))
        fmap = build_map(lines, planes)
        scan_lines, scan_planes = scan_view(truth, lines, planes)
        sol = solve_lio(scan_lines, scan_planes, fmap, nav_at(pred), weak)
        assert np.linalg.norm(sol.pose.translation - truth.translation) < 5e-6
        assert sol.pose.rotation.angle_to(truth.rotation) < 5e-6

    def test_exact_recovery_three_planes(self):
        weak = np.eye(6) * 1e4
        planes = [
            plane_feature((5.0, 0.0, -1.5), (0.0, 0.0, 1.0), seed=4),
            plane_feature((5.0, 2.7, 0.0), (0.0, 1.0, 0.0), seed=5),
            plane_feature((12.0, 0.0, 0.0), (1.0, 0.0, 0.0), seed=6),
        ]
        truth = RigidTransform(so3_exp(np.array([-0.02, 0.01, 0.02])),
                               np.array([0.2, 0.3, -0.15]))
        pred = RigidTransform(truth.rotation @ so3_exp(np.radians([2.0, 1.0, -1.0])),
                              truth.translation + np.array([-0.15, 0.1, 0.2]))
        fmap = build_map([], planes)
        scan_lines, scan_planes = scan_view(truth, [], planes)
        sol = solve_lio(scan_lines, scan_planes, fmap, nav_at(pred), weak)
        assert np.linalg.norm(sol.pose.translation - truth.translation) < 5e-6
        assert sol.pose.rotation.angle_to(truth.rotation) < 5e-6

    def test_floor_only_flags_longitudinal(self):
        planes = [plane_feature((5.0, 0.0, -1.5), (0.0, 0.0, 1.0), n=120, seed=8)]
        truth = RigidTransform.identity()
        pred = RigidTransform(Rotation.identity(), np.array([0.2, 0.0, 0.1]))
        sol = solve_scene(truth, pred, lines=[], planes=planes)
        # along-track, cross-track, and yaw are unconstrained by one plane
        assert sol.degeneracy_flags[0]
        assert sol.degeneracy_flags[1]
        assert sol.degeneracy_flags[5]
        assert not sol.degeneracy_flags[2]
        assert sol.degenerate
        # the solve must not move the pose along the unconstrained axis
        assert sol.pose.translation[0] == pytest.approx(0.2, abs=1e-9)
        # height is observable and gets pulled onto the plane
        assert abs(sol.pose.translation[2]) < 5e-3
        # inflated spread along the blind axis
        assert sol.covariance[0, 0] > 10.0 * sol.covariance[2, 2]

    def test_cost_trace_non_increasing(self):
        truth = RigidTransform(Rotation.identity(), np.array([0.5, 0.0, 0.0]))
        pred = RigidTransform(so3_exp(np.radians([0.0, 0.0, 1.0])),
                              np.array([0.42, 0.06, -0.05]))
        sol = solve_scene(truth, pred)
        assert np.all(np.diff(sol.cost_trace) <= 1e-12)

    def test_translational_equivariance_planes(self):
        shift = np.array([10.0, -7.0, 3.0])
        T_shift = RigidTransform(Rotation.identity(), shift)
        truth = RigidTransform(so3_exp(np.array([0.0, 0.0, 0.02])),
                               np.array([0.4, -0.1, 0.05]))
        pred = RigidTransform(truth.rotation,
                              truth.translation + np.array([0.1, -0.08, 0.06]))
        planes = [
            plane_feature((5.0, 0.0, -1.5), (0.0, 0.0, 1.0), seed=4),
            plane_feature((5.0, 2.7, 0.0), (0.0, 1.0, 0.0), seed=5),
            plane_feature((12.0, 0.0, 0.0), (1.0, 0.0, 0.0), seed=6),
        ]
        sol_a = solve_scene(truth, pred, lines=[], planes=planes)

        planes_s = [transform_plane_feature(T_shift, f) for f in planes]
        fmap = build_map([], planes_s)
        scan_lines, scan_planes = scan_view(truth, [], planes)
        sol_b = solve_lio(scan_lines, scan_planes, fmap,
                          nav_at(T_shift @ pred), PRIOR_COV)

        assert np.allclose(sol_b.pose.translation,
                           sol_a.pose.translation + shift, atol=1e-8)
        assert sol_b.pose.rotation.angle_to(sol_a.pose.rotation) < 1e-8

    def test_translational_equivariance_with_lines(self):
        # line misfit is measured in each line's own transverse coordinates,
        # which move with the world frame, so once a displaced prior drags
        # the optimum off the zero-residual manifold the conjugacy is only
        # approximate; at zero residual it is exact
        shift = np.array([10.0, -7.0, 3.0])
        T_shift = RigidTransform(Rotation.identity(), shift)
        truth = RigidTransform(so3_exp(np.array([0.0, 0.0, 0.02])),
                               np.array([0.4, -0.1, 0.05]))
        pred = RigidTransform(truth.rotation,
                              truth.translation + np.array([0.1, -0.08, 0.06]))

        lines, planes = scene_lines(), scene_planes()
        sol_a = solve_scene(truth, pred, lines=lines, planes=planes)

        lines_s = [transform_line_feature(T_shift, f) for f in lines]
        planes_s = [transform_plane_feature(T_shift, f) for f in planes]
        fmap = build_map(lines_s, planes_s)
        scan_lines, scan_planes = scan_view(truth, lines, planes)
        sol_b = solve_lio(scan_lines, scan_planes, fmap,
                          nav_at(T_shift @ pred), PRIOR_COV)

        assert np.allclose(sol_b.pose.translation,
                           sol_a.pose.translation + shift, atol=1e-5)
        assert sol_b.pose.rotation.angle_to(sol_a.pose.rotation) < 1e-5

    def test_empty_map_raises(self):
        with pytest.raises(InsufficientCorrespondences):
            solve_lio([], [], LocalFeatureMap(), nav_at(RigidTransform.identity()),
                      PRIOR_COV)

    def test_no_matches_raises(self):
        fmap = build_map([line_feature((0.0, -2.0, 1.0), (1.0, 0.0, 0.0))], [])
        scan = [line_feature((0.0, 3.0, 1.0), (1.0, 0.0, 0.0))]
        with pytest.raises(InsufficientCorrespondences):
            solve_lio(scan, [], fmap, nav_at(RigidTransform.identity()), PRIOR_COV)

    def test_single_line_below_minimum(self):
        line = line_feature((0.0, -2.0, 1.0), (1.0, 0.0, 0.0))
        fmap = build_map([line], [])
        with pytest.raises(InsufficientCorrespondences):
            solve_lio([line], [], fmap, nav_at(RigidTransform.identity()), PRIOR_COV)

    def test_plane_jacobian_matches_central_difference(self):
        rng = np.random.default_rng(11)
        pose = RigidTransform(so3_exp(rng.normal(size=3) * 0.3), rng.normal(size=3))
        pts = rng.normal(size=(6, 3)) * 2.0
        plane = Plane.from_point_normal(rng.normal(size=3), rng.normal(size=3))
        J = _plane_jacobian(pose, pts, plane.normal)
        h = 1e-6
        for c in range(6):
            d = np.zeros(6)
            d[c] = h
            rp = plane.signed_distance(pose_retract(pose, d).apply(pts))
            rm = plane.signed_distance(pose_retract(pose, -d).apply(pts))
            fd = (rp - rm) / (2 * h)
            assert np.allclose(J[:, c], fd, atol=1e-6)

    def test_preintegration_term_consistent_at_rest(self):
        ts = np.arange(0.0, 0.5 + 1e-9, 1.0 / 200.0)
        samples = [ImuSample(t, np.array([0.0, 0.0, 9.81]), np.zeros(3)) for t in ts]
        prev = NavState(0.0, np.zeros(3), np.zeros(3), Rotation.identity(), ZERO_BIAS)
        delta = preintegrate(samples, ZERO_BIAS, ImuNoiseConfig())
        pred_state = propagate_state(prev, samples)

        lines, planes = scene_lines(), scene_planes()
        fmap = build_map(lines, planes)
        scan_lines, scan_planes = scan_view(RigidTransform.identity(), lines, planes)
        sol = solve_lio(scan_lines, scan_planes, fmap, pred_state, PRIOR_COV,
                        preint=delta, prev_state=prev)
        assert np.linalg.norm(sol.pose.translation) < 1e-6
        assert sol.pose.rotation.angle_to(Rotation.identity()) < 1e-6

    def test_solution_counts(self):
        truth = RigidTransform.identity()
        sol = solve_scene(truth, truth)
        assert sol.n_line_matches == 2
        assert sol.n_plane_points == 160
