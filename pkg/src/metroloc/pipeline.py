"""Dataset-to-trajectory orchestration.

Streams a recorded dataset in stamp order through feature extraction,
scan alignment, the visual window, and the fusion graph, then writes the
estimated trajectory, the accumulated map, and run logs. Processing is
sequential and seeded, so a given dataset and configuration always
produce byte-identical outputs; per-frame module failures are logged and
skipped rather than aborting the run.
"""

import dataclasses
import json
import os
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataset_io import (
    Dataset,
    TimedPose,
    accumulate_map,
    load_dataset,
    save_trajectory,
    write_ply,
)
from .errors import InvalidParams, MetrolocError, MissingFile
from .features import (
    EdgeConfig,
    RailConfig,
    deskew_scan,
    extract_edges,
    extract_planes,
    extract_rail_tracks,
)
from .fusion import FusionConfig, FusionGraph, initial_state_at_rest
from .geometry import RigidTransform, canonicalize_line
from .imu import NavState, preintegrate, propagate_state, propagate_states
from .lio import LioConfig, LocalFeatureMap, solve_lio
from .solver import LmOptions
from .vio import (
    Landmark,
    RelativeMotion,
    VioConfig,
    associate_depth,
    solve_vio,
    triangulate_point,
)

MODES = ("full", "lio", "vio", "imu")

_STREAM_NEEDS = {
    "full": ("imu", "scans", "tracks"),
    "lio": ("imu", "scans"),
    "vio": ("imu", "tracks"),
    "imu": ("imu",),
}


@dataclass
class PipelineConfig:
    """Run-wide settings plus the per-module configurations."""

    mode: str = "full"
    voxel: float = 0.2  # map downsampling, m
    init_window: float = 0.2  # seconds of IMU averaged for levelling
    lio_prior_sigma_t: float = 0.05  # m, prediction prior per frame
    lio_prior_sigma_r_deg: float = 1.0
    vio_motion_sigma_t: float = 0.02  # m, IMU prior between camera frames
    vio_motion_sigma_r_deg: float = 0.5
    vio_stride: int = 2  # solve the camera window every Nth frame
    vio_max_point_tracks: int = 30  # per window solve
    vio_max_line_tracks: int = 8
    factor_sigma_floor: float = 1e-4  # keeps relative factors invertible
    scale_degenerate_inflation: float = 1e4
    lio_jump_gate: float = 0.3  # m, relative factor vs IMU prediction
    write_map: bool = True
    lio_cfg: LioConfig = field(default_factory=LioConfig)
    vio_cfg: VioConfig = field(default_factory=VioConfig)
    # online use tolerates a looser optimizer than the batch default
    fusion_cfg: FusionConfig = field(default_factory=lambda: FusionConfig(
        lm=LmOptions(max_iters=12, step_tol=1e-9, cost_tol=1e-7)))
    rail_cfg: RailConfig = field(default_factory=RailConfig)
    edge_cfg: EdgeConfig = field(default_factory=EdgeConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParams("mode %r not one of %s" % (self.mode, MODES))
        if self.voxel <= 0.0:
            raise InvalidParams("voxel must be positive")
        if self.vio_stride < 1:
            raise InvalidParams("vio_stride must be >= 1")


def _apply_overrides(value, overrides, path):
    if not isinstance(overrides, dict):
        raise InvalidParams("%s must be a JSON object" % path)
    names = {f.name: f for f in dataclasses.fields(value)}
    kwargs = {}
    for key, item in overrides.items():
        if key not in names:
            raise InvalidParams("unknown config key %s.%s" % (path, key))
        current = getattr(value, key)
        if dataclasses.is_dataclass(current) and not isinstance(item, dict):
            raise InvalidParams("%s.%s expects an object" % (path, key))
        if dataclasses.is_dataclass(current):
            kwargs[key] = _apply_overrides(current, item, path + "." + key)
        else:
            kwargs[key] = item
    return dataclasses.replace(value, **kwargs)


def config_from_dict(raw: Optional[dict]) -> PipelineConfig:
    """Build a PipelineConfig from a JSON-style dict of overrides.

    Nested module settings live under ``lio_cfg``, ``vio_cfg``,
    ``fusion_cfg``, ``rail_cfg``, ``edge_cfg``; unknown keys raise
    InvalidParams rather than being silently ignored.
    """
    return _apply_overrides(PipelineConfig(), raw or {}, "config")


@dataclass
class PipelineResult:
    trajectory: List[TimedPose]
    outputs: Dict[str, str]
    timings: Dict[str, float]
    wall_time: float
    degeneracy_events: List[dict]
    frames: int
    mode: str
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class _Timers:
    def __init__(self):
        self.acc: Dict[str, float] = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.acc[name] = self.acc.get(name, 0.0) + time.perf_counter() - t0


def _pose_info(sigma_t, sigma_r_deg):
    cov = np.zeros((6, 6))
    cov[0:3, 0:3] = np.eye(3) * sigma_t ** 2
    cov[3:6, 3:6] = np.eye(3) * np.radians(sigma_r_deg) ** 2
    return cov


def _triangulate_line(track, cam_poses) -> Optional[Landmark]:
    """3D line from the first and last views: each observed image line
    spans a plane through its camera center; the landmark is the plane
    intersection. Returns None without parallax (near-parallel planes)."""
    obs = [(s, np.asarray(m, dtype=float)) for s, m in track.observations
           if s in cam_poses]
    if len(obs) < 2:
        return None
    planes = []
    for s, l in (obs[0], obs[-1]):
        pose = cam_poses[s]
        n = pose.rotation.apply(l)
        planes.append((n, float(n @ pose.translation)))
    (n1, d1), (n2, d2) = planes
    direction = np.cross(n1, n2)
    nd = float(np.linalg.norm(direction))
    if nd < 1e-4 * np.linalg.norm(n1) * np.linalg.norm(n2):
        return None
    point, *_ = np.linalg.lstsq(np.stack([n1, n2]), np.array([d1, d2]),
                                rcond=None)
    direction = direction / nd
    ends = np.stack([point - 5.0 * direction, point + 5.0 * direction])
    return Landmark(track.feature_id, "line", anchor_stamp=obs[0][0],
                    line=canonicalize_line(point, direction),
                    line_endpoints=ends)


class _VioWindow:
    """Sliding camera-frame window feeding relative-motion factors."""

    def __init__(self, cfg: PipelineConfig, rig, timers):
        self.cfg = cfg
        self.rig = rig
        self.timers = timers
        self.frames = deque(maxlen=cfg.vio_cfg.window)
        self.t_bc = rig.t_body_camera
        self.last_solution = None
        self.pushes = 0

    def push(self, stamp, observations):
        self.frames.append((float(stamp), observations))
        self.pushes += 1

    def tracks(self):
        seen, out = set(), []
        for _, observations in self.frames:
            for track, _ in observations:
                if track.feature_id not in seen:
                    seen.add(track.feature_id)
                    out.append(track)
        return out

    def _select(self, tracks, stamps):
        """Bound the solve to the best-observed tracks of each kind; ids
        break ties so the subset is identical run to run."""
        caps = {"point": self.cfg.vio_max_point_tracks,
                "line": self.cfg.vio_max_line_tracks}
        out = []
        for kind in ("point", "line"):
            pool = [t for t in tracks if t.kind == kind]
            pool.sort(key=lambda t: (
                -sum(1 for s, _ in t.observations if s in stamps),
                t.feature_id))
            out.extend(pool[:caps[kind]])
        return out

    def attach_depths(self, scan_points):
        fresh = [t for t in self.tracks()
                 if t.kind == "point" and t.depth is None]
        if not fresh:
            return 0
        t_cam_lidar = self.t_bc.inverse().compose(self.rig.t_body_lidar)
        return associate_depth(fresh, scan_points, t_cam_lidar,
                               self.rig.intrinsics)

    def solve(self, body_pose_at) -> Optional[Tuple[float, float,
                                                    RigidTransform,
                                                    np.ndarray, bool]]:
        """Optimize the window; returns the newest relative body motion
        (stamp_i, stamp_j, transform, covariance, scale_degenerate)."""
        # frames whose stamp never became a node cannot anchor anything
        posed = [(s, body_pose_at(s), obs) for s, obs in self.frames]
        posed = [(s, p, obs) for s, p, obs in posed if p is not None]
        if len(posed) < 2 or len(posed) > self.cfg.vio_cfg.window:
            return None
        stamps = [s for s, _, _ in posed]
        body = [p for _, p, _ in posed]
        cam_poses = [p.compose(self.t_bc) for p in body]
        by_stamp = dict(zip(stamps, cam_poses))
        seen, tracks = set(), []
        for _, _, observations in posed:
            for track, _ in observations:
                if track.feature_id not in seen:
                    seen.add(track.feature_id)
                    tracks.append(track)
        tracks = self._select(tracks, set(stamps))

        landmarks = []
        for track in tracks:
            if track.kind == "point":
                try:
                    lm = triangulate_point(track, by_stamp,
                                           self.rig.intrinsics,
                                           self.cfg.vio_cfg.min_parallax_deg,
                                           self.cfg.vio_cfg.max_reproj_px)
                except MetrolocError:
                    lm = None
            else:
                lm = _triangulate_line(track, by_stamp)
            if lm is not None:
                landmarks.append(lm)

        motion_cov = _pose_info(self.cfg.vio_motion_sigma_t,
                                self.cfg.vio_motion_sigma_r_deg)
        priors = []
        for k in range(len(stamps) - 1):
            rel_body = body[k].inverse().compose(body[k + 1])
            rel_cam = self.t_bc.inverse().compose(rel_body).compose(self.t_bc)
            priors.append(RelativeMotion(k, k + 1, rel_cam, motion_cov))

        try:
            sol = solve_vio(stamps, cam_poses, tracks, landmarks, priors,
                            self.cfg.vio_cfg)
        except MetrolocError:
            return None
        self.last_solution = sol
        rel_cam = sol.poses[-2].inverse().compose(sol.poses[-1])
        rel_body = self.t_bc.compose(rel_cam).compose(self.t_bc.inverse())
        cov = sol.pose_covariances.get(stamps[-1])
        if cov is None:
            cov = _pose_info(0.05, 1.0)
        cov = np.asarray(cov, dtype=float).reshape(6, 6).copy()
        if sol.scale_degenerate:
            # without lidar depth the whole window is monocular; its
            # optimizer covariance is far too confident, rotation included
            cov *= self.cfg.scale_degenerate_inflation
        return stamps[-2], stamps[-1], rel_body, cov, sol.scale_degenerate


class _Run:
    """State of one pipeline execution."""

    def __init__(self, ds: Dataset, cfg: PipelineConfig):
        self.ds = ds
        self.cfg = cfg
        self.rig = ds.manifest.rig
        self.gravity = np.array([0.0, 0.0, ds.manifest.gravity])
        self.timers = _Timers()
        self.graph = FusionGraph(cfg.fusion_cfg)
        self.feature_map = LocalFeatureMap(cfg.lio_cfg.map_keyframes)
        self.vio = _VioWindow(cfg, self.rig, self.timers)
        self.emitted: Dict[int, TimedPose] = {}
        self.node_by_stamp: Dict[float, int] = {}
        self.imu_buf: List = []
        self.last_scan_points = None
        self.prev_lio_pose: Optional[RigidTransform] = None
        self.degeneracy_events: List[dict] = []
        self.frames = 0
        self.init_state: Optional[NavState] = None

    # -- shared node plumbing ------------------------------------------------

    def _record_states(self):
        for node in self.graph.nodes:
            self.emitted[node.id] = TimedPose(node.stamp, node.state.pose())

    def _start_graph(self, state: NavState):
        nid = self.graph.add_node(state.timestamp, initial=state)
        info = np.zeros((15, 15))
        info[0:6, 0:6] = np.eye(6) * 1e8  # gauge: pose defines the frame
        # a run may begin at a slow crawl rather than a dead stop, so the
        # rest assumption only holds to ~0.5 m/s
        info[6:9, 6:9] = np.eye(3) * 4.0
        info[9:15, 9:15] = np.eye(6) * 1e4
        self.graph.add_prior(nid, info)
        self.node_by_stamp[state.timestamp] = nid
        self._record_states()
        return nid

    def _advance_node(self, stamp) -> Optional[int]:
        """New node at ``stamp`` seeded by propagating the buffered IMU."""
        prev = self.graph.nodes[-1]
        buf = [s for s in self.imu_buf
               if prev.stamp - 1e-9 <= s.timestamp <= stamp + 1e-9]
        if len(buf) < 2 or abs(buf[-1].timestamp - stamp) > 1e-6:
            return None
        delta = preintegrate(buf, prev.state.bias, self.rig.imu_noise)
        nid = self.graph.add_node(stamp, samples=buf)
        self.graph.add_preintegration_factor(prev.id, nid, delta)
        self.node_by_stamp[float(stamp)] = nid
        self._record_states()
        return nid

    def _optimize(self):
        self.graph.optimize(covariances=False)
        self._record_states()
        self.graph.marginalize_oldest(self.cfg.fusion_cfg.window)
        self.imu_buf = [s for s in self.imu_buf
                        if s.timestamp >= self.graph.nodes[-1].stamp - 1e-9]

    def body_pose_at(self, stamp) -> Optional[RigidTransform]:
        nid = self.node_by_stamp.get(float(stamp))
        if nid is None:
            return None
        return self.emitted[nid].pose

    # -- per-event handlers ----------------------------------------------------

    def on_imu(self, sample):
        self.imu_buf.append(sample)
        if self.init_state is None:
            t0 = self.imu_buf[0].timestamp
            if sample.timestamp - t0 >= self.cfg.init_window:
                self.init_state = initial_state_at_rest(
                    t0, self.imu_buf, self.gravity)
                if self.cfg.mode != "imu":
                    self._start_graph(self.init_state)

    def on_scan(self, scan):
        if self.init_state is None or self.cfg.mode not in ("full", "lio"):
            return
        prev = self.graph.nodes[-1]
        with self.timers("lio"):
            deskewed, features = self._extract(scan, prev)
        if deskewed is None:
            return
        self.last_scan_points = deskewed.points
        scan_lines, scan_planes = features

        with self.timers("lio"):
            solution = None
            if not self.feature_map.is_empty:
                prediction = self._predict(prev, scan.frame_end)
                if prediction is not None:
                    try:
                        solution = solve_lio(
                            scan_lines, scan_planes, self.feature_map,
                            prediction,
                            _pose_info(self.cfg.lio_prior_sigma_t,
                                       self.cfg.lio_prior_sigma_r_deg),
                            self.cfg.lio_cfg, gravity=self.gravity)
                    except MetrolocError as err:
                        self._log_event(scan.frame_end, "lio_skip", str(err))

        with self.timers("fusion"):
            prev_pose = prev.state.pose()
            nid = self._advance_node(scan.frame_end)
            if nid is None:
                return
            if solution is not None:
                rel = prev_pose.inverse().compose(solution.pose)
                cov = solution.covariance + np.eye(6) * \
                    self.cfg.factor_sigma_floor ** 2
                jump = np.linalg.norm(solution.pose.translation
                                      - prediction.position)
                if jump > self.cfg.lio_jump_gate:
                    # re-association snap: the pose step is not physical
                    # motion and must not enter as a confident measurement
                    cov = cov * 1e4
                    self._log_event(scan.frame_end, "lio_jump",
                                    "%.3f m vs prediction" % jump)
                self.graph.add_relative_pose_factor("lio", prev.id, nid,
                                                    rel, cov)
                if solution.degenerate:
                    self._log_event(
                        scan.frame_end, "lio_degenerate",
                        "flags=%s" % solution.degeneracy_flags.tolist())
            self._optimize()
            self.frames += 1
            node_pose = self.emitted[self.node_by_stamp[scan.frame_end]].pose

        with self.timers("lio"):
            if self.feature_map.needs_keyframe(
                    node_pose, self.cfg.lio_cfg.keyframe_dist,
                    self.cfg.lio_cfg.keyframe_angle_deg):
                self.feature_map.add_keyframe(node_pose, scan_lines,
                                              scan_planes)

    def on_camera(self, stamp, observations):
        if self.init_state is None or self.cfg.mode not in ("full", "vio"):
            return
        with self.timers("vio"):
            self.vio.push(stamp, observations)
            if self.vio.pushes % self.cfg.vio_stride:
                return
            if self.cfg.mode == "vio":
                if self.node_by_stamp.get(float(stamp)) is None and \
                        self.graph.nodes[-1].stamp < stamp:
                    nid = self._advance_node(stamp)
                    if nid is None:
                        return
            if self.last_scan_points is not None:
                self.vio.attach_depths(self.last_scan_points)
            factor = self.vio.solve(self.body_pose_at)
        if factor is None:
            return
        stamp_i, stamp_j, rel, cov, scale_degenerate = factor
        ni = self.node_by_stamp.get(float(stamp_i))
        nj = self.node_by_stamp.get(float(stamp_j))
        live = {n.id for n in self.graph.nodes}
        if ni is None or nj is None or ni not in live or nj not in live:
            return
        with self.timers("fusion"):
            cov = cov + np.eye(6) * self.cfg.factor_sigma_floor ** 2
            self.graph.add_relative_pose_factor("vio", ni, nj, rel, cov)
            if scale_degenerate:
                self._log_event(stamp_j, "vio_scale_degenerate", "")
            if self.cfg.mode == "vio":
                self._optimize()
                self.frames += 1
            # in full mode the factor is absorbed at the next scan solve

    # -- helpers ---------------------------------------------------------------

    def _log_event(self, stamp, kind, detail):
        self.degeneracy_events.append(
            {"stamp": float(stamp), "kind": kind, "detail": detail})

    def _predict(self, node, stamp) -> Optional[NavState]:
        buf = [s for s in self.imu_buf
               if node.stamp - 1e-9 <= s.timestamp <= stamp + 1e-9]
        if len(buf) < 2 or abs(buf[-1].timestamp - stamp) > 1e-6:
            return None
        return propagate_state(node.state, buf, self.gravity)

    def _extract(self, scan, node):
        start = node.state
        cover = [s for s in self.imu_buf
                 if scan.frame_start - 1e-9 <= s.timestamp
                 <= scan.frame_end + 0.05]
        if abs(node.stamp - scan.frame_start) > 1e-6:
            lead = [s for s in self.imu_buf
                    if node.stamp - 1e-9 <= s.timestamp
                    <= scan.frame_start + 1e-9]
            if len(lead) < 2:
                return None, None
            start = propagate_state(node.state, lead, self.gravity)
        if len(cover) < 2:
            return None, None
        deskewed = deskew_scan(scan, start, cover, self.rig.t_body_lidar)

        lines = []
        try:
            lines.extend(extract_rail_tracks(deskewed, self.cfg.rail_cfg))
        except MetrolocError as err:
            self._log_event(scan.frame_end, "rails_skip", str(err))
        try:
            lines.extend(extract_edges(deskewed, self.cfg.edge_cfg))
        except MetrolocError as err:
            self._log_event(scan.frame_end, "edges_skip", str(err))
        try:
            planes = extract_planes(deskewed, self.cfg.edge_cfg)
        except MetrolocError as err:
            self._log_event(scan.frame_end, "planes_skip", str(err))
            planes = []
        return deskewed, (lines, planes)

    # -- trajectory assembly ---------------------------------------------------

    def trajectory(self) -> List[TimedPose]:
        if self.cfg.mode == "imu":
            return self._imu_trajectory()
        out = sorted(self.emitted.values(), key=lambda tp: tp.stamp)
        return out

    def _imu_trajectory(self) -> List[TimedPose]:
        if self.init_state is None or len(self.imu_buf) < 2:
            return []
        ts = np.array([s.timestamp for s in self.imu_buf])
        acc = np.array([s.accel for s in self.imu_buf])
        gyr = np.array([s.gyro for s in self.imu_buf])
        pos, _, quat = propagate_states(self.init_state, ts, acc, gyr,
                                        self.gravity)
        from .geometry import Rotation
        return [TimedPose(float(ts[k]),
                          RigidTransform(Rotation(quat[k]), pos[k]))
                for k in range(ts.size)]


def run_pipeline(dataset_dir: str, config: Optional[PipelineConfig] = None,
                 out_dir: Optional[str] = None) -> PipelineResult:
    """Process a dataset directory into trajectory, map, and logs.

    ``config.mode`` picks the sensor set: "full" (LiDAR + camera + IMU),
    "lio" (LiDAR + IMU), "vio" (camera + IMU), or "imu" (dead reckoning).
    The dataset must carry the streams the mode needs. Outputs land in
    ``out_dir``: trajectory.csv, map.ply (when scans exist and the map is
    enabled), timing.json, and events.json. On a module error the partial
    outputs are still written and the error is reported in the result.
    """
    cfg = config or PipelineConfig()
    ds = load_dataset(dataset_dir)
    for stream in _STREAM_NEEDS[cfg.mode]:
        if not ds.has(stream):
            raise MissingFile(
                "mode %r needs the %r stream" % (cfg.mode, stream))

    run = _Run(ds, cfg)
    wall0 = time.perf_counter()
    error = None
    try:
        with run.timers("io"):
            merged = ds.merged()
        while True:
            with run.timers("io"):
                try:
                    stamp, kind, payload = next(merged)
                except StopIteration:
                    break
            if kind == "imu":
                with run.timers("io"):
                    run.on_imu(payload)
            elif kind == "scan":
                run.on_scan(payload)
            elif kind == "camera":
                run.on_camera(stamp, payload)
    except MetrolocError as err:
        error = "%s: %s" % (type(err).__name__, err)

    with run.timers("io"):
        trajectory = run.trajectory()
    outputs: Dict[str, str] = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if trajectory:
            with run.timers("io"):
                path = os.path.join(out_dir, "trajectory.csv")
                save_trajectory(trajectory, path)
            outputs["trajectory"] = path
        if cfg.write_map and ds.has("scans") and trajectory \
                and error is None and cfg.mode != "imu":
            try:
                with run.timers("map"):
                    points = accumulate_map(ds.scans(), trajectory,
                                            cfg.voxel, run.rig.t_body_lidar)
                    path = os.path.join(out_dir, "map.ply")
                    write_ply(points, path)
                outputs["map"] = path
            except MetrolocError as err:
                run._log_event(float("nan"), "map_skip", str(err))
        wall = time.perf_counter() - wall0
        timing = {
            "wall_s": wall,
            "modules_s": dict(sorted(run.timers.acc.items())),
            "coverage": (sum(run.timers.acc.values()) / wall
                         if wall > 0 else 1.0),
            "frames": run.frames,
        }
        path = os.path.join(out_dir, "timing.json")
        with open(path, "w") as fh:
            json.dump(timing, fh, indent=1, sort_keys=True)
            fh.write("\n")
        outputs["timing"] = path
        path = os.path.join(out_dir, "events.json")
        with open(path, "w") as fh:
            json.dump(run.degeneracy_events, fh, indent=1)
            fh.write("\n")
        outputs["events"] = path
    wall = time.perf_counter() - wall0

    return PipelineResult(
        trajectory=trajectory,
        outputs=outputs,
        timings=dict(run.timers.acc),
        wall_time=wall,
        degeneracy_events=run.degeneracy_events,
        frames=run.frames,
        mode=cfg.mode,
        error=error,
    )
