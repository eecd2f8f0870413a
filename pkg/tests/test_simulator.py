"""Synthetic world, trajectory, and sensor-stream tests.

Geometry oracles are closed-form (circle geometry, plane distances);
stream consistency is checked by round-tripping through the propagation
and residual code the synthetic data is meant to exercise.
"""

import math
import os

import numpy as np
import numpy.testing as npt
import pytest

from metroloc.dataset_io import SensorRig, load_dataset
from metroloc.errors import InvalidParams
from metroloc.features import deskew_scan, fit_plane
from metroloc.geometry import RigidTransform, Rotation
from metroloc.imu import GRAVITY, ImuBias, ImuNoiseConfig, propagate_state
from metroloc.simulator import (
    SURFACE_BED,
    SURFACE_PORTAL,
    SURFACE_RAIL,
    SURFACE_WALL,
    Centerline,
    TrajectorySpec,
    WorldModel,
    WorldParams,
    build_world,
    generate_trajectory,
    simulate_dataset,
    synthesize_camera_tracks,
    synthesize_imu,
    synthesize_lidar,
)
from metroloc.vio import line_reprojection_residual, point_reprojection_residual

QUIET_IMU = ImuNoiseConfig(accel_noise=0.0, gyro_noise=0.0,
                           accel_walk=0.0, gyro_walk=0.0)


def small_rig(points=1500, range_sigma=0.0, pixel_sigma=0.0):
    return SensorRig(imu_noise=QUIET_IMU, lidar_points=points,
                     lidar_range_sigma=range_sigma, pixel_sigma=pixel_sigma)


class TestCenterline:
    def test_straight_endpoints(self):
        world = build_world("straight_tunnel", {"length": 750.0})
        a, _, _ = world.centerline.eval(0.0)
        b, _, _ = world.centerline.eval(world.length)
        assert abs(np.linalg.norm(b - a) - 750.0) < 1e-9

    def test_arc_curvature_everywhere(self):
        world = build_world("curved_tunnel",
                            {"radius": 800.0, "arc_length": 200.0,
                             "lead": 50.0})
        assert abs(world.length - 300.0) < 1e-9
        for s in np.linspace(51.0, 249.0, 40):
            _, _, kappa = world.centerline.eval(s)
            assert abs(kappa - 1.0 / 800.0) < 1e-15
        _, _, kappa = world.centerline.eval(10.0)
        assert kappa == 0.0

    def test_quarter_circle_oracle(self):
        radius = 10.0
        line = Centerline([("arc", math.pi / 2.0 * radius, radius)])
        xy, heading, _ = line.eval(line.length)
        npt.assert_allclose(xy, [radius, radius], atol=1e-12)
        assert abs(heading - math.pi / 2.0) < 1e-12

    def test_c1_at_segment_joins(self):
        line = Centerline([("straight", 20.0), ("arc", 30.0, -15.0),
                           ("straight", 10.0)])
        for s_join in (20.0, 50.0):
            xy0, h0, _ = line.eval(s_join - 1e-7)
            xy1, h1, _ = line.eval(s_join + 1e-7)
            assert np.linalg.norm(xy1 - xy0) < 1e-5
            assert abs(h1 - h0) < 1e-6

    def test_bad_segments_rejected(self):
        with pytest.raises(InvalidParams):
            Centerline([])
        with pytest.raises(InvalidParams):
            Centerline([("straight", -5.0)])
        with pytest.raises(InvalidParams):
            Centerline([("spiral", 10.0)])


class TestBuildWorld:
    def test_scenario_validation(self):
        with pytest.raises(InvalidParams):
            build_world("station_loop")
        with pytest.raises(InvalidParams):
            build_world("straight_tunnel", {"length": -10.0})
        with pytest.raises(InvalidParams):
            build_world("straight_tunnel", {"length": 50.0, "bogus": 1.0})

    def test_station_landmark_density(self):
        world = build_world("crossover_station",
                            {"length": 420.0, "station_span": 100.0},
                            seed=3)
        (s0, s1), = world.stations
        xs = world.point_landmarks[:, 0]  # straight tunnel: arclength = x
        inside = ((xs >= s0) & (xs <= s1)).sum() / (s1 - s0)
        outside = ((xs < s0) | (xs > s1)).sum() / (world.length - (s1 - s0))
        assert inside >= 5.0 * outside

    def test_rails_sit_at_gauge_offsets(self):
        world = build_world("straight_tunnel", {"length": 40.0})
        g = world.params.gauge
        for s in (7.0, 23.0, 33.0):
            for side in (1.0, -1.0):
                origin = np.array([s, side * g / 2.0, 1.0])
                t, rid = world.cast_rays(origin, [[0.0, 0.0, -1.0]], 10.0)
                assert world.surface_kind(rid)[0] == SURFACE_RAIL
                assert abs(t[0] - (1.0 - world.params.rail_head_top)) < 1e-9
            t, rid = world.cast_rays([s, 0.0, 1.0], [[0.0, 0.0, -1.0]], 10.0)
            assert world.surface_kind(rid)[0] == SURFACE_BED
            assert abs(t[0] - 1.0) < 1e-9

    def test_ray_caster_examples(self):
        world = build_world("straight_tunnel", {"length": 30.0})
        # lateral ray meets the wall plane at half the bore width
        t, rid = world.cast_rays([5.0, 0.0, 1.0], [[0.0, 1.0, 0.0]], 50.0)
        assert world.surface_kind(rid)[0] == SURFACE_WALL
        assert abs(t[0] - 2.7) < 1e-9
        # down the open bore: no surface, even within range
        t, rid = world.cast_rays([5.0, 0.0, 2.0], [[1.0, 0.0, 0.0]], 50.0)
        assert rid[0] == -1 and np.isinf(t[0])
        # the portal post at s=25 protrudes 0.15 m; its front face is a
        # constant-x plane at 24.85
        t, rid = world.cast_rays([5.0, 2.66, 2.0], [[1.0, 0.0, 0.0]], 50.0)
        assert world.surface_kind(rid)[0] == SURFACE_PORTAL
        assert abs(t[0] - 19.85) < 1e-9


class TestTrajectory:
    def test_duration_example(self):
        world = build_world("straight_tunnel", {"length": 120.0})
        traj = generate_trajectory(world, TrajectorySpec(length=100.0,
                                                         speed=10.0))
        assert abs(traj.duration - 10.0) < 1e-12

    def test_straight_is_inertial(self):
        world = build_world("straight_tunnel", {"length": 60.0})
        traj = generate_trajectory(world, TrajectorySpec(length=50.0,
                                                         speed=12.0))
        for t in (0.3, 2.0, 3.7):
            npt.assert_allclose(traj.acceleration(t), 0.0, atol=1e-12)
            npt.assert_allclose(traj.angular_velocity(t), 0.0, atol=1e-12)
            npt.assert_allclose(traj.velocity(t)[0], 12.0, atol=1e-12)

    def test_arc_centripetal_magnitude(self):
        world = build_world("curved_tunnel",
                            {"radius": 50.0, "arc_length": 80.0, "lead": 10.0})
        v = 8.0
        traj = generate_trajectory(world, TrajectorySpec(length=95.0, speed=v))
        t_mid = (10.0 + 40.0) / v  # mid-arc
        acc = traj.acceleration(t_mid)
        assert abs(np.linalg.norm(acc) - v * v / 50.0) < 1e-9
        omega = traj.angular_velocity(t_mid)
        assert abs(omega[2] - v / 50.0) < 1e-12

    def test_derivatives_match_finite_differences(self):
        world = build_world("curved_tunnel",
                            {"radius": 60.0, "arc_length": 90.0, "lead": 20.0})
        spec = TrajectorySpec(length=120.0, profile=((60.0, 8.0), (60.0, 11.0)))
        traj = generate_trajectory(world, spec)
        h = 1e-5
        for t in np.linspace(0.4, traj.duration - 0.4, 17):
            p0 = traj.pose(t - h)
            p1 = traj.pose(t + h)
            vel_fd = (p1.translation - p0.translation) / (2.0 * h)
            if np.linalg.norm(vel_fd - traj.velocity(t)) > 1e-6:
                # acceleration steps at block joins; skip the straddle
                v0 = traj.velocity(t - 2 * h)
                v1 = traj.velocity(t + 2 * h)
                assert np.linalg.norm(v1 - v0) > 0.0
                continue
            from metroloc.geometry import so3_log
            w_fd = so3_log(p0.rotation.inverse() @ p1.rotation) / (2.0 * h)
            npt.assert_allclose(w_fd, traj.angular_velocity(t), atol=1e-6)

    def test_profile_ramps(self):
        world = build_world("straight_tunnel", {"length": 130.0})
        spec = TrajectorySpec(length=120.0, profile=((60.0, 10.0), (60.0, 14.0)),
                              ramp_accel=1.0)
        traj = generate_trajectory(world, spec)
        assert abs(np.linalg.norm(traj.velocity(traj.t0 + 1.0)) - 10.0) < 1e-12
        assert abs(np.linalg.norm(traj.velocity(traj.t1 - 0.1)) - 14.0) < 1e-12
        # 60 m at 10, then 4 s ramp over 48 m, then 12 m at 14
        want = 6.0 + 4.0 + 12.0 / 14.0
        assert abs(traj.duration - want) < 1e-9
        mid = traj.velocity(traj.t0 + 6.0 + 2.0)
        assert abs(np.linalg.norm(mid) - 12.0) < 1e-9

    def test_validation(self):
        world = build_world("straight_tunnel", {"length": 50.0})
        with pytest.raises(InvalidParams):
            generate_trajectory(world, TrajectorySpec(length=80.0))
        with pytest.raises(InvalidParams):
            TrajectorySpec(length=10.0, speed=-3.0)
        with pytest.raises(InvalidParams):
            TrajectorySpec(length=10.0, profile=((4.0, 5.0),))
        with pytest.raises(InvalidParams):
            # ramp 5 -> 50 m/s at 1 m/s^2 needs far more than 5 m
            generate_trajectory(world, TrajectorySpec(
                length=10.0, profile=((5.0, 5.0), (5.0, 50.0))))


class TestImuSynthesis:
    def test_constant_cruise_reads_gravity_only(self):
        world = build_world("straight_tunnel", {"length": 60.0})
        traj = generate_trajectory(world, TrajectorySpec(length=50.0,
                                                         speed=10.0))
        samples, trace = synthesize_imu(traj, small_rig(), seed=5)
        assert len(samples) == int(5.0 * 200) + 1
        for s in samples[:: 200]:
            npt.assert_allclose(s.accel, [0.0, 0.0, 9.81], atol=1e-12)
            npt.assert_allclose(s.gyro, 0.0, atol=1e-15)
        assert all(np.all(b.as_vector() == 0.0) for b in trace)

    def test_noiseless_stream_propagates_back(self):
        # single-arc world: crossing a straight/arc join would put a rate
        # discontinuity on a sample, and trapezoidal dead reckoning turns
        # that into a one-off 0.5*|dw|*dt heading offset
        world = WorldModel(Centerline([("arc", 70.0, 40.0)]), WorldParams())
        traj = generate_trajectory(world, TrajectorySpec(length=60.0, speed=8.0))
        assert traj.duration == pytest.approx(7.5)
        samples, _ = synthesize_imu(traj, small_rig(), seed=6)
        state = propagate_state(traj.state_at(traj.t0), samples)
        want = traj.state_at(traj.t1)
        assert np.linalg.norm(state.position - want.position) < 1e-4
        assert np.linalg.norm(state.velocity - want.velocity) < 1e-4
        assert state.orientation.angle_to(want.orientation) < 1e-5

    def test_join_crossing_error_stays_bounded(self):
        world = build_world("curved_tunnel",
                            {"radius": 40.0, "arc_length": 70.0, "lead": 10.0})
        traj = generate_trajectory(world, TrajectorySpec(length=88.0, speed=8.0))
        samples, _ = synthesize_imu(traj, small_rig(), seed=6)
        state = propagate_state(traj.state_at(traj.t0), samples)
        want = traj.state_at(traj.t1)
        # two sampled kinks, each worth ~v * 0.5*|dw|*dt * t_arc in position
        assert np.linalg.norm(state.position - want.position) < 0.1
        assert np.linalg.norm(state.velocity - want.velocity) < 1e-4

    def test_bias_trace_is_what_was_added(self):
        world = build_world("straight_tunnel", {"length": 30.0})
        traj = generate_trajectory(world, TrajectorySpec(length=20.0, speed=10.0))
        rig = SensorRig(imu_noise=ImuNoiseConfig(accel_noise=0.0,
                                                 gyro_noise=0.0,
                                                 accel_walk=1e-3,
                                                 gyro_walk=1e-3))
        b0 = ImuBias(np.array([0.05, 0.0, -0.02]), np.array([0.01, 0.0, 0.0]))
        samples, trace = synthesize_imu(traj, rig, seed=7, init_bias=b0)
        npt.assert_allclose(trace[0].accel, b0.accel, atol=1e-15)
        drift = np.linalg.norm(trace[-1].gyro - trace[0].gyro)
        assert 0.0 < drift < 1e-2
        for k in (0, 77, len(samples) - 1):
            s = samples[k]
            npt.assert_allclose(s.accel - trace[k].accel, [0, 0, 9.81],
                                atol=1e-12)
            npt.assert_allclose(s.gyro, trace[k].gyro, atol=1e-15)


class TestLidarSynthesis:
    def _run(self, sigma=0.0, length=40.0, speed=5.0, points=1500, seed=8):
        world = build_world("straight_tunnel", {"length": length})
        traj = generate_trajectory(world, TrajectorySpec(length=length - 10.0,
                                                         speed=speed))
        rig = small_rig(points=points, range_sigma=sigma)
        return world, traj, rig, list(synthesize_lidar(traj, world, rig,
                                                       seed=seed))

    def test_fov_and_range_hold_for_all_points(self):
        _, _, rig, scans = self._run(sigma=0.02)
        assert len(scans) == 60
        for scan in scans[::7]:
            r = np.linalg.norm(scan.points, axis=1)
            assert (r <= rig.lidar_max_range + 0.2).all()
            az = np.degrees(np.arctan2(scan.points[:, 1], scan.points[:, 0]))
            el = np.degrees(np.arcsin(scan.points[:, 2] / r))
            assert (np.abs(az) <= 32.5 + 1e-9).all()
            assert (np.abs(el) <= 20.0 + 1e-6).all()
            assert scan.frame_end - scan.frame_start == pytest.approx(0.1)
            assert (np.diff(scan.t_offset) >= 0.0).all()

    def test_points_lie_on_surfaces_before_noise(self):
        world, traj, _, scans = self._run(sigma=0.0)
        for scan in scans[::11]:
            ts = scan.frame_start + scan.t_offset
            quats, trans = traj.pose_many(ts)
            w, z = quats[:, 0], quats[:, 3]
            cos_h, sin_h = w * w - z * z, 2.0 * w * z
            pts = scan.points
            world_pts = np.stack([cos_h * pts[:, 0] - sin_h * pts[:, 1],
                                  sin_h * pts[:, 0] + cos_h * pts[:, 1],
                                  pts[:, 2]], axis=1) + trans
            res = world.surface_residual(world_pts, scan.labels)
            assert res.max() < 1e-9

    def test_deterministic_under_seed(self):
        _, _, _, first = self._run(sigma=0.02, seed=9)
        _, _, _, second = self._run(sigma=0.02, seed=9)
        for a, b in zip(first, second):
            npt.assert_array_equal(a.points, b.points)
            npt.assert_array_equal(a.t_offset, b.t_offset)
        _, _, _, other = self._run(sigma=0.02, seed=10)
        assert not np.array_equal(first[0].points, other[0].points)

    def test_deskew_restores_portal_face(self):
        world, traj, rig, scans = self._run(sigma=0.02, length=60.0,
                                            speed=10.0, points=4000)
        samples, _ = synthesize_imu(traj, rig, seed=8)
        scan = face = None
        for cand in scans:
            kinds = world.surface_kind(cand.labels)
            normals = world.surface_normal(cand.labels)
            mask = (kinds == SURFACE_PORTAL) & (np.abs(normals[:, 0]) > 0.9)
            if mask.sum() < 100:
                continue
            # portals repeat every 25 m; keep only the nearest one
            xs = cand.points[:, 0]
            mask &= xs < xs[mask].min() + 5.0
            if mask.sum() > 100:
                scan, face = cand, mask
                break
        assert scan is not None
        start = traj.state_at(scan.frame_start)
        cover = [s for s in samples
                 if scan.frame_start - 1e-9 <= s.timestamp
                 <= scan.frame_end + 0.006]
        fixed = deskew_scan(scan, start, cover)
        # raw points smear ~1 m of travel across the constant-x face
        raw_rms = fit_plane(scan.points[face]).rms
        fixed_rms = fit_plane(fixed.points[face]).rms
        assert raw_rms > 5.0 * rig.lidar_range_sigma
        assert fixed_rms < 2.0 * rig.lidar_range_sigma


class TestCameraTracks:
    def _world_traj(self, length=40.0, speed=5.0):
        world = build_world("straight_tunnel", {"length": length}, seed=11)
        traj = generate_trajectory(world, TrajectorySpec(length=length - 10.0,
                                                         speed=speed))
        return world, traj

    def test_boresight_landmark_reads_zero(self):
        world, traj = self._world_traj()
        rig = small_rig()
        start = traj.pose(traj.t0)
        cam = start.compose(rig.t_body_camera)
        fwd = cam.rotation.matrix()[:, 2]
        world.point_landmarks = (cam.translation + 5.0 * fwd)[None, :]
        world.line_landmarks = []
        tracks = synthesize_camera_tracks(traj, world, rig, seed=11)
        first = [t for t in tracks if t.first_stamp() == traj.t0]
        assert len(first) == 1
        npt.assert_allclose(first[0].first_measurement(), 0.0, atol=1e-12)

    def test_track_ends_after_leaving_view(self):
        world, traj = self._world_traj(speed=5.0)
        rig = small_rig()
        # landmark 10 m in: the camera passes it at t = 2 s
        world.point_landmarks = np.array([[10.0, 2.0, 2.0]])
        world.line_landmarks = []
        tracks = synthesize_camera_tracks(traj, world, rig, seed=12)
        assert len(tracks) == 1
        last = tracks[0].observations[-1][0]
        assert last <= 2.0 + 1e-9
        # no resurrected twin after it left view for good
        assert tracks[0].feature_id == 0

    def test_noiseless_tracks_reproject_exactly(self):
        world, traj = self._world_traj()
        rig = small_rig()
        tracks = synthesize_camera_tracks(traj, world, rig, seed=11)
        points = [t for t in tracks if t.kind == "point"]
        lines = [t for t in tracks if t.kind == "line"]
        assert points and lines
        checked = 0
        for tr in points[:25]:
            lm = world.point_landmarks[tr.feature_id % 100_000_000]
            for stamp, meas in tr.observations:
                cam = traj.pose(stamp).compose(rig.t_body_camera)
                res = point_reprojection_residual(cam, lm, meas)
                assert np.linalg.norm(res) < 1e-10
                checked += 1
        assert checked > 50
        for tr in lines[:8]:
            seg = world.line_landmarks[(tr.feature_id - 10_000_000)
                                       % 100_000_000]
            for stamp, meas in tr.observations:
                cam = traj.pose(stamp).compose(rig.t_body_camera)
                res = line_reprojection_residual(cam, seg, meas)
                assert np.linalg.norm(res) < 1e-10

    def test_landmark_behind_wall_never_seen(self):
        world, traj = self._world_traj()
        rig = small_rig()
        world.point_landmarks = np.array([[20.0, 5.0, 2.0]])  # beyond the wall
        world.line_landmarks = []
        tracks = synthesize_camera_tracks(traj, world, rig, seed=13)
        assert tracks == []

    def test_dropout_thins_tracks(self):
        world, traj = self._world_traj()
        rig = small_rig()
        full = synthesize_camera_tracks(traj, world, rig, seed=11)
        thin = synthesize_camera_tracks(traj, world, rig, seed=11, dropout=0.8)
        n_full = sum(len(t.observations) for t in full)
        n_thin = sum(len(t.observations) for t in thin)
        assert n_thin < 0.5 * n_full


class TestExport:
    def test_round_trip_and_determinism(self, tmp_path):
        out1 = str(tmp_path / "a")
        out2 = str(tmp_path / "b")
        kw = dict(scenario="straight_tunnel",
                  world_params={"length": 30.0},
                  spec=TrajectorySpec(length=20.0, speed=5.0),
                  rig=small_rig(points=800, range_sigma=0.02,
                                pixel_sigma=0.5),
                  seed=21)
        world, traj, manifest = simulate_dataset(out1, **kw)
        simulate_dataset(out2, **kw)
        files1 = sorted(os.path.join(dp, f) for dp, _, fs in os.walk(out1)
                        for f in fs)
        files2 = sorted(os.path.join(dp, f) for dp, _, fs in os.walk(out2)
                        for f in fs)
        assert [os.path.relpath(p, out1) for p in files1] \
            == [os.path.relpath(p, out2) for p in files2]
        for a, b in zip(files1, files2):
            assert open(a, "rb").read() == open(b, "rb").read()

        ds = load_dataset(out1)
        assert len(ds.imu()) == manifest.files["imu"]["count"]
        scans = list(ds.scans())
        assert len(scans) == manifest.files["scans"]["count"] == 40
        gt = ds.groundtruth()
        assert gt is not None
        assert abs(gt[-1].stamp - traj.t1) < 1e-9
        tracks = ds.tracks()
        assert sum(len(t.observations) for t in tracks) \
            == manifest.files["tracks"]["count"]
