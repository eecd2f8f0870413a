"""Visual-inertial alignment over a short camera window.

Feature tracks live in normalized image coordinates.  Point landmarks are
parameterized by inverse depth at their anchor frame; a LiDAR depth, when
one can be associated, both seeds that inverse depth and pins it with a
prior row, which is what makes the monocular scale observable.  Line
landmarks act as fixed structure: their two projected support endpoints
are measured against the observed image line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateProjection,
    InsufficientConstraints,
    InsufficientParallax,
)
from .geometry import (
    InfiniteLine,
    RigidTransform,
    pose_retract,
    relative_pose_jacobians,
    relative_pose_residual,
    skew,
)
from .solver import LmOptions, Problem

MIN_CAMERA_Z = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def pixel_from_normalized(self, n):
        n = np.asarray(n, dtype=float)
        px = np.empty_like(n)
        px[..., 0] = self.fx * n[..., 0] + self.cx
        px[..., 1] = self.fy * n[..., 1] + self.cy
        return px

    def normalized_from_pixel(self, px):
        px = np.asarray(px, dtype=float)
        n = np.empty_like(px)
        n[..., 0] = (px[..., 0] - self.cx) / self.fx
        n[..., 1] = (px[..., 1] - self.cy) / self.fy
        return n

    def contains(self, px, margin: float = 0.0) -> np.ndarray:
        px = np.atleast_2d(np.asarray(px, dtype=float))
        ok = (px[:, 0] >= margin) & (px[:, 0] <= self.width - 1 - margin)
        ok &= (px[:, 1] >= margin) & (px[:, 1] <= self.height - 1 - margin)
        return ok


@dataclass
class FeatureTrack:
    """One tracked image feature.

    ``observations`` is a list of (stamp, measurement); points carry a
    normalized (u, v), lines a normalized 2D line (l1, l2, l3) with
    l1^2 + l2^2 = 1 so that l . (u, v, 1) is a signed distance.
    """

    feature_id: int
    kind: str  # "point" | "line"
    observations: List[Tuple[float, np.ndarray]] = field(default_factory=list)
    depth: Optional[float] = None  # camera z at the first observation

    def first_stamp(self) -> float:
        return self.observations[0][0]

    def first_measurement(self) -> np.ndarray:
        return np.asarray(self.observations[0][1], dtype=float)


@dataclass
class Landmark:
    feature_id: int
    kind: str  # "point" | "line"
    anchor_stamp: float
    point: Optional[np.ndarray] = None  # world
    depth: Optional[float] = None  # camera z at the anchor
    depth_from_lidar: bool = False
    line: Optional[InfiniteLine] = None
    line_endpoints: Optional[np.ndarray] = None  # (2, 3) world support


@dataclass(frozen=True)
class VioConfig:
    window: int = 10
    reproj_sigma: float = 0.002  # normalized units, about one pixel
    huber: float = 0.01  # normalized units
    depth_sigma: float = 0.05  # m, on LiDAR-anchored depths
    min_frames: int = 2
    min_rows: int = 8
    min_parallax_deg: float = 1.0
    max_reproj_px: float = 5.0
    lm: LmOptions = field(default_factory=lambda: LmOptions(
        max_iters=60, step_tol=1e-11, cost_tol=1e-16))


@dataclass(frozen=True)
class RelativeMotion:
    """Relative camera-frame motion between two window frames, distilled
    from IMU preintegration by the caller."""

    i: int
    j: int
    transform: RigidTransform
    covariance: np.ndarray  # 6x6, (dt, dtheta) order


@dataclass
class VioSolution:
    stamps: List[float]
    poses: List[RigidTransform]
    landmarks: Dict[int, Landmark]
    cost: float
    cost_trace: np.ndarray
    converged: bool
    scale_degenerate: bool
    n_rows: int
    track_residuals: Dict[int, List[Tuple[float, float]]]
    pose_covariances: Dict[float, np.ndarray]


# -- projection residuals ----------------------------------------------------


def _project(p_cam: np.ndarray) -> np.ndarray:
    return p_cam[:2] / p_cam[2]


def point_reprojection_residual(pose: RigidTransform, point_world: np.ndarray,
                                observation: np.ndarray) -> np.ndarray:
    """Normalized-plane reprojection error of a world point.

    ``pose`` maps camera to world.  Raises BehindCamera when the point sits
    at or behind z = 0.1 in the camera.
    """
    p_cam = pose.inverse().apply(np.asarray(point_world, dtype=float))
    if p_cam[2] <= MIN_CAMERA_Z:
        raise BehindCamera("camera z %.3f below %.1f" % (p_cam[2], MIN_CAMERA_Z))
    return _project(p_cam) - np.asarray(observation, dtype=float)


def point_reprojection_jacobian(pose: RigidTransform, point_world: np.ndarray
                                ) -> Tuple[np.ndarray, np.ndarray]:
    """(d r / d pose tangent, d r / d world point) for the residual above.

    Pose tangent is (dp world, dtheta right); no BehindCamera guard.
    """
    R = pose.rotation
    p_cam = pose.inverse().apply(np.asarray(point_world, dtype=float))
    x, y, z = p_cam
    Jpi = np.array([[1.0 / z, 0.0, -x / z / z],
                    [0.0, 1.0 / z, -y / z / z]])
    Rt = R.inverse().matrix()
    J_point = Jpi @ Rt
    J_pose = np.empty((2, 6))
    J_pose[:, 0:3] = -J_point
    J_pose[:, 3:6] = Jpi @ skew(p_cam)
    return J_pose, J_point


def line_reprojection_residual(pose: RigidTransform, endpoints_world: np.ndarray,
                               observed_line: np.ndarray) -> np.ndarray:
    """Signed distances of two projected support endpoints to an image line.

    ``observed_line`` is (l1, l2, l3) with the first two components unit;
    raises DegenerateProjection when an endpoint projects at or behind the
    optical plane.
    """
    ends = np.asarray(endpoints_world, dtype=float).reshape(2, 3)
    line = np.asarray(observed_line, dtype=float)
    inv = pose.inverse()
    r = np.empty(2)
    for k in range(2):
        p_cam = inv.apply(ends[k])
        if p_cam[2] <= MIN_CAMERA_Z:
            raise DegenerateProjection(
                "support endpoint camera z %.3f below %.1f"
                % (p_cam[2], MIN_CAMERA_Z))
        n = _project(p_cam)
        r[k] = line[0] * n[0] + line[1] * n[1] + line[2]
    return r


def line_reprojection_jacobian(pose: RigidTransform, endpoints_world: np.ndarray,
                               observed_line: np.ndarray) -> np.ndarray:
    """(2, 6) derivative of the line residual in the pose tangent."""
    ends = np.asarray(endpoints_world, dtype=float).reshape(2, 3)
    line = np.asarray(observed_line, dtype=float)
    J = np.empty((2, 6))
    for k in range(2):
        J_pose, _ = point_reprojection_jacobian(pose, ends[k])
        J[k] = line[0] * J_pose[0] + line[1] * J_pose[1]
    return J


# -- depth association and triangulation -------------------------------------


def associate_depth(tracks: Sequence[FeatureTrack], scan_points: np.ndarray,
                    T_camera_from_lidar: RigidTransform, cam: CameraIntrinsics,
                    radius_px: float = 5.0) -> int:
    """Attach LiDAR depths to point tracks by projecting the scan into the
    camera.

    A track gets a depth when at least three scan points project within
    ``radius_px`` of its first observation; the depth is the median camera
    z after discarding returns beyond twice the raw median (foreground
    wins at depth discontinuities).  Returns how many tracks were updated.
    """
    pts = np.atleast_2d(np.asarray(scan_points, dtype=float))
    p_cam = T_camera_from_lidar.apply(pts)
    front = p_cam[:, 2] > MIN_CAMERA_Z
    p_cam = p_cam[front]
    if p_cam.shape[0] == 0:
        return 0
    norm = p_cam[:, :2] / p_cam[:, 2:3]
    px = cam.pixel_from_normalized(norm)
    updated = 0
    for track in tracks:
        if track.kind != "point" or track.depth is not None:
            continue
        target = cam.pixel_from_normalized(track.first_measurement())
        d2 = np.sum((px - target) ** 2, axis=1)
        z = p_cam[d2 <= radius_px * radius_px, 2]
        if z.shape[0] < 3:
            continue
        med = float(np.median(z))
        keep = z <= 2.0 * med
        track.depth = float(np.median(z[keep]))
        updated += 1
    return updated


def triangulate_point(track: FeatureTrack,
                      poses: Dict[float, RigidTransform],
                      cam: CameraIntrinsics,
                      min_parallax_deg: float = 1.0,
                      max_reproj_px: float = 5.0) -> Optional[Landmark]:
    """Initialize a point landmark from a track.

    With an associated depth the first observation is back-projected
    directly.  Otherwise the point is the linear multi-view intersection,
    which needs more than ``min_parallax_deg`` of ray parallax (raises
    InsufficientParallax below it, e.g. under pure rotation) and is
    discarded (None) when any reprojection exceeds ``max_reproj_px``.
    """
    obs = [(s, np.asarray(m, dtype=float)) for s, m in track.observations
           if s in poses]
    if not obs:
        return None
    anchor_stamp, m0 = obs[0]
    anchor = poses[anchor_stamp]

    if track.depth is not None:
        p_cam = track.depth * np.array([m0[0], m0[1], 1.0])
        return Landmark(feature_id=track.feature_id, kind="point",
                        anchor_stamp=anchor_stamp, point=anchor.apply(p_cam),
                        depth=float(track.depth), depth_from_lidar=True)

    if len(obs) < 2:
        raise InsufficientParallax("single observation and no depth")

    bearings = []
    for stamp, m in obs:
        ray = np.array([m[0], m[1], 1.0])
        ray /= np.linalg.norm(ray)
        bearings.append(poses[stamp].rotation.apply(ray))
    best = 0.0
    for i in range(len(bearings)):
        for j in range(i + 1, len(bearings)):
            dot = np.clip(np.dot(bearings[i], bearings[j]), -1.0, 1.0)
            best = max(best, float(np.degrees(np.arccos(dot))))
    if best <= min_parallax_deg:
        raise InsufficientParallax(
            "max ray parallax %.3f deg at or below %.3f deg"
            % (best, min_parallax_deg))

    rows = []
    rhs = []
    for stamp, m in obs:
        inv = poses[stamp].inverse()
        R, t = inv.rotation.matrix(), inv.translation
        # u * (row3 . X + t3) = row1 . X + t1, likewise for v
        rows.append(m[0] * R[2] - R[0])
        rhs.append(t[0] - m[0] * t[2])
        rows.append(m[1] * R[2] - R[1])
        rhs.append(t[1] - m[1] * t[2])
    X, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)

    tol = max_reproj_px / cam.fx
    for stamp, m in obs:
        p_cam = poses[stamp].inverse().apply(X)
        if p_cam[2] <= MIN_CAMERA_Z:
            return None
        if np.linalg.norm(_project(p_cam) - m) > tol:
            return None
    depth = float(anchor.inverse().apply(X)[2])
    if depth <= MIN_CAMERA_Z:
        return None
    return Landmark(feature_id=track.feature_id, kind="point",
                    anchor_stamp=anchor_stamp, point=X, depth=depth,
                    depth_from_lidar=False)


# -- windowed solve -----------------------------------------------------------


def _clamped_cam(p_cam: np.ndarray) -> np.ndarray:
    # total residual for the solver: flat extension below the z floor
    if p_cam[2] < MIN_CAMERA_Z:
        p_cam = p_cam.copy()
        p_cam[2] = MIN_CAMERA_Z
    return p_cam


def solve_vio(stamps: Sequence[float],
              poses: Sequence[RigidTransform],
              tracks: Sequence[FeatureTrack],
              landmarks: Sequence[Landmark],
              motion_priors: Sequence[RelativeMotion] = (),
              cfg: Optional[VioConfig] = None) -> VioSolution:
    """Optimize window poses and point inverse depths against the tracks.

    The first window pose is held fixed as the gauge.  Point landmarks must
    be anchored at a window stamp; their LiDAR depths, when present, add a
    prior row each.  Raises InsufficientConstraints for fewer than two
    frames or fewer than ``cfg.min_rows`` reprojection rows.  The scale
    flag in the result is set when no landmark carries a LiDAR depth.
    """
    if cfg is None:
        cfg = VioConfig()
    stamps = [float(s) for s in stamps]
    if len(stamps) != len(poses):
        raise ValueError("stamps and poses length mismatch")
    if len(stamps) < cfg.min_frames:
        raise InsufficientConstraints(
            "%d frames, need %d" % (len(stamps), cfg.min_frames))
    if len(stamps) > cfg.window:
        raise ValueError("window of %d exceeds capacity %d"
                         % (len(stamps), cfg.window))
    index = {s: k for k, s in enumerate(stamps)}
    track_by_id = {t.feature_id: t for t in tracks}

    problem = Problem()
    for k, pose in enumerate(poses):
        problem.add_variable("pose%d" % k, pose, 6, pose_retract, fixed=(k == 0))

    def rho_retract(value, delta):
        # keep the inverse depth a python float across retractions
        return float(value + delta[0])

    n_rows = 0
    whitened_huber = cfg.huber / cfg.reproj_sigma
    used_landmarks: Dict[int, Landmark] = {}
    obs_refs: List[Tuple[int, float, object, object]] = []

    for lm in landmarks:
        track = track_by_id.get(lm.feature_id)
        if track is None:
            continue
        obs = [(s, np.asarray(m, dtype=float)) for s, m in track.observations
               if s in index]
        if lm.kind == "point":
            if lm.anchor_stamp not in index:
                raise ValueError("landmark %d anchored outside the window"
                                 % lm.feature_id)
            if lm.depth is None or lm.depth <= 0:
                raise ValueError("point landmark %d lacks a positive depth"
                                 % lm.feature_id)
            a = index[lm.anchor_stamp]
            m0 = np.array([track.first_measurement()[0],
                           track.first_measurement()[1], 1.0])
            rho_key = "rho%d" % lm.feature_id
            problem.add_variable(rho_key, 1.0 / float(lm.depth), 1, rho_retract)
            used_landmarks[lm.feature_id] = lm

            for stamp, meas in obs:
                k = index[stamp]
                if k == a:
                    continue  # anchored observation is identically zero

                def fn(values, k=k, a=a, m0=m0, meas=meas, rk=rho_key):
                    world = values["pose%d" % a].apply(m0 / values[rk])
                    p_cam = _clamped_cam(values["pose%d" % k].inverse().apply(world))
                    return _project(p_cam) - meas

                def jac(values, k=k, a=a, m0=m0, rk=rho_key):
                    rho = values[rk]
                    pose_a = values["pose%d" % a]
                    world = pose_a.apply(m0 / rho)
                    pose_k = values["pose%d" % k]
                    J_pose, J_point = point_reprojection_jacobian(pose_k, world)
                    J_anchor = np.empty((2, 6))
                    J_anchor[:, 0:3] = J_point
                    J_anchor[:, 3:6] = J_point @ (
                        -pose_a.rotation.matrix() @ skew(m0 / rho))
                    J_rho = (J_point @ (pose_a.rotation.apply(m0)
                                        * (-1.0 / rho / rho))).reshape(2, 1)
                    return {"pose%d" % k: J_pose, "pose%d" % a: J_anchor,
                            rk: J_rho}

                problem.add_block(["pose%d" % k, "pose%d" % a, rho_key], fn,
                                  jac=jac, sigmas=cfg.reproj_sigma,
                                  huber=whitened_huber)
                obs_refs.append((lm.feature_id, stamp, fn, None))
                n_rows += 2

            if lm.depth_from_lidar:
                def depth_fn(values, d=float(lm.depth), rk=rho_key):
                    return np.array([(1.0 / values[rk] - d) / cfg.depth_sigma])

                def depth_jac(values, rk=rho_key):
                    rho = values[rk]
                    return {rk: np.array([[-1.0 / rho / rho / cfg.depth_sigma]])}

                problem.add_block([rho_key], depth_fn, jac=depth_jac)
        elif lm.kind == "line":
            if lm.line_endpoints is None:
                raise ValueError("line landmark %d lacks support endpoints"
                                 % lm.feature_id)
            ends = np.asarray(lm.line_endpoints, dtype=float).reshape(2, 3)
            used_landmarks[lm.feature_id] = lm
            for stamp, meas in obs:
                k = index[stamp]

                def lfn(values, k=k, ends=ends, meas=meas):
                    inv = values["pose%d" % k].inverse()
                    r = np.empty(2)
                    for e in range(2):
                        p_cam = _clamped_cam(inv.apply(ends[e]))
                        n = _project(p_cam)
                        r[e] = meas[0] * n[0] + meas[1] * n[1] + meas[2]
                    return r

                def ljac(values, k=k, ends=ends, meas=meas):
                    return {"pose%d" % k: line_reprojection_jacobian(
                        values["pose%d" % k], ends, meas)}

                problem.add_block(["pose%d" % k], lfn, jac=ljac,
                                  sigmas=cfg.reproj_sigma, huber=whitened_huber)
                obs_refs.append((lm.feature_id, stamp, lfn, None))
                n_rows += 2
        else:
            raise ValueError("unknown landmark kind %r" % (lm.kind,))

    if n_rows < cfg.min_rows:
        raise InsufficientConstraints(
            "%d reprojection rows, need %d" % (n_rows, cfg.min_rows))

    for mp in motion_priors:
        L = np.linalg.cholesky(np.linalg.inv(
            0.5 * (mp.covariance + mp.covariance.T)))

        def mp_fn(values, mp=mp, L=L):
            r = relative_pose_residual(mp.transform,
                                       values["pose%d" % mp.i],
                                       values["pose%d" % mp.j])
            return L.T @ r

        def mp_jac(values, mp=mp, L=L):
            J_i, J_j = relative_pose_jacobians(mp.transform,
                                               values["pose%d" % mp.i],
                                               values["pose%d" % mp.j])
            return {"pose%d" % mp.i: L.T @ J_i, "pose%d" % mp.j: L.T @ J_j}

        problem.add_block(["pose%d" % mp.i, "pose%d" % mp.j], mp_fn,
                          jac=mp_jac)

    result = problem.solve(cfg.lm)

    out_poses = [result.values["pose%d" % k] for k in range(len(stamps))]
    out_landmarks: Dict[int, Landmark] = {}
    for fid, lm in used_landmarks.items():
        if lm.kind == "point":
            rho = float(result.values["rho%d" % fid])
            track = track_by_id[fid]
            m0 = np.array([track.first_measurement()[0],
                           track.first_measurement()[1], 1.0])
            anchor = out_poses[index[lm.anchor_stamp]]
            out_landmarks[fid] = Landmark(
                feature_id=fid, kind="point", anchor_stamp=lm.anchor_stamp,
                point=anchor.apply(m0 / rho), depth=1.0 / rho,
                depth_from_lidar=lm.depth_from_lidar)
        else:
            out_landmarks[fid] = lm

    track_residuals: Dict[int, List[Tuple[float, float]]] = {}
    for fid, stamp, fn, _ in obs_refs:
        r = fn(result.values)
        track_residuals.setdefault(fid, []).append(
            (stamp, float(np.linalg.norm(r))))

    pose_covs: Dict[float, np.ndarray] = {}
    H = 0.5 * (result.hessian + result.hessian.T)
    try:
        cov_full = np.linalg.inv(H)
        for k in range(1, len(stamps)):
            off, dim = result.offsets["pose%d" % k]
            pose_covs[stamps[k]] = cov_full[off:off + dim, off:off + dim]
    except np.linalg.LinAlgError:
        pass

    scale_degenerate = not any(
        lm.kind == "point" and lm.depth_from_lidar
        for lm in used_landmarks.values())

    return VioSolution(
        stamps=stamps,
        poses=out_poses,
        landmarks=out_landmarks,
        cost=result.cost,
        cost_trace=np.asarray(result.cost_trace, dtype=float),
        converged=result.converged,
        scale_degenerate=scale_degenerate,
        n_rows=n_rows,
        track_residuals=track_residuals,
        pose_covariances=pose_covs,
    )


def cull_tracks(tracks: Sequence[FeatureTrack],
                residuals: Dict[int, List[Tuple[float, float]]],
                threshold: float, consecutive: int = 2) -> List[FeatureTrack]:
    """Keep tracks whose trailing residuals do not end with ``consecutive``
    values above ``threshold``."""
    kept = []
    for track in tracks:
        rs = sorted(residuals.get(track.feature_id, []))
        tail = [v for _, v in rs[-consecutive:]]
        if len(tail) >= consecutive and all(v > threshold for v in tail):
            continue
        kept.append(track)
    return kept
