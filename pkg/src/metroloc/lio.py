"""Scan-to-map LiDAR-inertial alignment.

A sliding map of recent keyframes holds line and plane landmarks in the
world frame.  Each incoming scan is aligned against that map by a damped
Gauss-Newton solve over the current pose only; the IMU prediction enters
both as the initial guess and as a prior term, so directions the scan
geometry cannot constrain stay glued to the inertial propagation instead
of drifting freely.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientCorrespondences
from .features import (
    LineFeature,
    MatchConfig,
    PlaneFeature,
    match_lines,
    match_planes,
)
from .geometry import (
    InfiniteLine,
    Plane,
    RigidTransform,
    line_ominus,
    pose_retract,
    so3_log,
    transform_line,
    transform_plane,
)
from .imu import NavState, PreintegratedDelta, imu_residual
from .solver import LmOptions, Problem


@dataclass(frozen=True)
class LioConfig:
    map_keyframes: int = 10
    keyframe_dist: float = 1.0
    keyframe_angle_deg: float = 5.0
    line_sigma: float = 0.02
    plane_sigma: float = 0.02
    huber: float = 0.1
    eigen_min: float = 1e2
    inflation: float = 100.0
    max_rounds: int = 3
    min_correspondences: int = 6
    match: MatchConfig = field(default_factory=MatchConfig)
    # tight stopping: noiseless alignments must reach the optimum itself,
    # not a 1e-6 neighbourhood of it
    lm: LmOptions = field(default_factory=lambda: LmOptions(
        max_iters=60, step_tol=1e-11, cost_tol=1e-16))


@dataclass(frozen=True)
class LioSolution:
    """Result of aligning one scan against the local map."""

    pose: RigidTransform
    covariance: np.ndarray
    residual_rms: float
    degeneracy_flags: np.ndarray
    n_line_matches: int
    n_plane_points: int
    degenerate_directions: np.ndarray
    iterations: int
    converged: bool
    cost_trace: np.ndarray

    @property
    def degenerate(self) -> bool:
        return bool(np.any(self.degeneracy_flags))


def transform_line_feature(pose: RigidTransform, feat: LineFeature) -> LineFeature:
    return replace(
        feat,
        line=transform_line(pose, feat.line),
        centroid=pose.apply(feat.centroid),
        points=pose.apply(feat.points),
        indices=None,
    )


def transform_plane_feature(pose: RigidTransform, feat: PlaneFeature) -> PlaneFeature:
    return replace(
        feat,
        plane=transform_plane(pose, feat.plane),
        centroid=pose.apply(feat.centroid),
        points=pose.apply(feat.points),
        indices=None,
    )


class LocalFeatureMap:
    """FIFO window of keyframes with their landmarks in the world frame.

    Features are handed in expressed in the keyframe body frame and stored
    transformed into the world frame; evicting the oldest keyframe drops
    its landmarks with it.
    """

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self._frames: deque = deque()

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def is_empty(self) -> bool:
        return not self._frames

    @property
    def keyframe_poses(self) -> List[RigidTransform]:
        return [pose for pose, _, _ in self._frames]

    @property
    def lines(self) -> List[LineFeature]:
        return [f for _, lines, _ in self._frames for f in lines]

    @property
    def planes(self) -> List[PlaneFeature]:
        return [f for _, _, planes in self._frames for f in planes]

    def needs_keyframe(self, pose: RigidTransform, min_dist: float = 1.0,
                       min_angle_deg: float = 5.0) -> bool:
        if not self._frames:
            return True
        last = self._frames[-1][0]
        dist = float(np.linalg.norm(pose.translation - last.translation))
        angle = last.rotation.angle_to(pose.rotation)
        return dist >= min_dist or np.degrees(angle) >= min_angle_deg

    def add_keyframe(self, pose: RigidTransform,
                     lines: Sequence[LineFeature],
                     planes: Sequence[PlaneFeature]) -> None:
        world_lines = [transform_line_feature(pose, f) for f in lines]
        world_planes = [transform_plane_feature(pose, f) for f in planes]
        self._frames.append((pose, world_lines, world_planes))
        while len(self._frames) > self.capacity:
            self._frames.popleft()


# -- residuals ---------------------------------------------------------------


def line_to_line_residual(pose: RigidTransform, line_i: InfiniteLine,
                          line_j: InfiniteLine) -> np.ndarray:
    """Minimal 4-vector between ``line_i`` mapped through ``pose`` and ``line_j``."""
    return line_ominus(transform_line(pose, line_i), line_j)


def point_to_plane_residual(pose: RigidTransform, point: np.ndarray,
                            plane: Plane) -> float:
    return float(plane.signed_distance(pose.apply(np.asarray(point, dtype=float))))


def plane_to_plane_residual(pose: RigidTransform,
                            correspondences: Sequence[Tuple[np.ndarray, Plane]]) -> float:
    """Sum of squared point-to-plane distances over all correspondences.

    Each correspondence pairs an (n, 3) block of points, expressed in the
    ``pose`` source frame, with a target plane.
    """
    total = 0.0
    for points, plane in correspondences:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = plane.signed_distance(pose.apply(pts))
        total += float(np.dot(d, d))
    return total


# -- alignment ---------------------------------------------------------------


def _whitener(covariance: np.ndarray) -> np.ndarray:
    cov = 0.5 * (covariance + covariance.T)
    return np.linalg.cholesky(np.linalg.inv(cov))


def _associate(pose, scan_lines, scan_planes, feature_map, match_cfg):
    inv = pose.inverse()
    map_lines = [transform_line_feature(inv, f) for f in feature_map.lines]
    map_planes = [transform_plane_feature(inv, f) for f in feature_map.planes]
    line_pairs = match_lines(map_lines, scan_lines, match_cfg)
    plane_pairs = match_planes(map_planes, scan_planes, match_cfg)
    return line_pairs, plane_pairs


def _plane_jacobian(pose: RigidTransform, points: np.ndarray,
                    normal: np.ndarray) -> np.ndarray:
    J = np.empty((points.shape[0], 6))
    J[:, 0:3] = normal
    # d(n . (R Exp(dtheta) x + t)) / dtheta = -n^T R [x]_x = (x cross R^T n)^T
    J[:, 3:6] = np.cross(points, pose.rotation.inverse().apply(normal))
    return J


def _build_problems(pose, prediction, prior_covariance, line_blocks, plane_blocks,
                    preint, prev_state, gravity, cfg):
    """One problem with all terms for solving, one with only scan-to-map
    terms whose curvature decides which directions the scan constrains."""
    full = Problem()
    feat = Problem()
    full.add_variable("pose", pose, 6, pose_retract)
    feat.add_variable("pose", pose, 6, pose_retract)

    for scan_line, map_line in line_blocks:
        def line_fn(values, s=scan_line, m=map_line):
            return line_ominus(transform_line(values["pose"], s), m)

        for prob in (full, feat):
            prob.add_block(["pose"], line_fn, sigmas=cfg.line_sigma,
                           huber=cfg.huber / cfg.line_sigma)

    for points, plane in plane_blocks:
        normal = plane.normal

        def plane_fn(values, pts=points, pl=plane):
            return pl.signed_distance(values["pose"].apply(pts))

        def plane_jac(values, pts=points, n=normal):
            return {"pose": _plane_jacobian(values["pose"], pts, n)}

        for prob in (full, feat):
            prob.add_block(["pose"], plane_fn, jac=plane_jac,
                           sigmas=cfg.plane_sigma,
                           huber=cfg.huber / cfg.plane_sigma)

    prior_L = _whitener(prior_covariance)
    p0 = prediction.position.copy()
    r0 = prediction.orientation

    def prior_fn(values, L=prior_L):
        pose_v = values["pose"]
        r = np.empty(6)
        r[0:3] = pose_v.translation - p0
        r[3:6] = so3_log(r0.inverse() @ pose_v.rotation)
        return L.T @ r

    full.add_block(["pose"], prior_fn)

    if preint is not None and prev_state is not None:
        idx = np.r_[0:3, 6:9]
        imu_L = _whitener(preint.covariance[np.ix_(idx, idx)])
        vel = prediction.velocity.copy()
        stamp = prev_state.timestamp + preint.dt_total

        def preint_fn(values, L=imu_L):
            pose_v = values["pose"]
            state_j = NavState(stamp, pose_v.translation, vel,
                               pose_v.rotation, prev_state.bias)
            r = imu_residual(preint, prev_state, state_j, gravity)
            return L.T @ r[idx]

        full.add_block(["pose"], preint_fn)

    return full, feat


def _degenerate_directions(H_feat: np.ndarray, eigen_min: float):
    w, V = np.linalg.eigh(0.5 * (H_feat + H_feat.T))
    weak = w < eigen_min
    return V[:, weak].T.copy()


def solve_lio(scan_lines: Sequence[LineFeature],
              scan_planes: Sequence[PlaneFeature],
              feature_map: LocalFeatureMap,
              prediction: NavState,
              prior_covariance: np.ndarray,
              cfg: Optional[LioConfig] = None,
              preint: Optional[PreintegratedDelta] = None,
              prev_state: Optional[NavState] = None,
              gravity: Optional[np.ndarray] = None) -> LioSolution:
    """Align one scan's features against the local map.

    ``prediction`` is the IMU-propagated state at the scan stamp and doubles
    as the prior mean with ``prior_covariance`` on its pose.  When ``preint``
    and ``prev_state`` are given, the preintegrated position and orientation
    rows are added as a further term with biases held fixed.

    Raises InsufficientCorrespondences when fewer than six line matches plus
    plane points survive association.  Degenerate directions are never an
    error: the step is projected off them, the flags are reported, and the
    returned covariance is inflated along them.
    """
    if cfg is None:
        cfg = LioConfig()
    if gravity is None:
        from .imu import GRAVITY
        gravity = GRAVITY
    if feature_map.is_empty:
        raise InsufficientCorrespondences("local feature map is empty")

    pose = prediction.pose()
    prev_pairs = None
    result = None
    feat_prob = None
    line_blocks: List[Tuple[InfiniteLine, InfiniteLine]] = []
    plane_blocks: List[Tuple[np.ndarray, Plane]] = []

    map_lines = feature_map.lines
    map_planes = feature_map.planes
    for _ in range(cfg.max_rounds):
        line_pairs, plane_pairs = _associate(pose, scan_lines, scan_planes,
                                             feature_map, cfg.match)
        line_blocks = [(scan_lines[j].line, map_lines[i].line)
                       for i, j in line_pairs]
        plane_blocks = [(np.asarray(scan_planes[j].points, dtype=float),
                         map_planes[i].plane)
                        for i, j in plane_pairs]
        n_l = len(line_blocks)
        n_p = sum(pts.shape[0] for pts, _ in plane_blocks)
        if n_l + n_p < cfg.min_correspondences:
            raise InsufficientCorrespondences(
                "%d line matches + %d plane points < %d"
                % (n_l, n_p, cfg.min_correspondences))

        full_prob, feat_prob = _build_problems(
            pose, prediction, prior_covariance, line_blocks, plane_blocks,
            preint, prev_state, gravity, cfg)
        H_feat, _, _ = feat_prob.normal_equations()
        weak = _degenerate_directions(H_feat, cfg.eigen_min)
        projector = None
        if weak.shape[0]:
            P = np.eye(6) - weak.T @ weak

            def projector(step, P=P):
                return P @ step

        result = full_prob.solve(cfg.lm, step_projector=projector)
        pose = result.values["pose"]
        pairs = (tuple(line_pairs), tuple(plane_pairs))
        if pairs == prev_pairs:
            break
        prev_pairs = pairs

    # report curvature at the solution
    feat_prob.set_value("pose", pose)
    H_feat, _, _ = feat_prob.normal_equations()
    weak = _degenerate_directions(H_feat, cfg.eigen_min)
    flags = np.zeros(6, dtype=bool)
    for v in weak:
        flags[int(np.argmax(np.abs(v)))] = True

    covariance = np.linalg.inv(0.5 * (result.hessian + result.hessian.T))
    if weak.shape[0]:
        M = np.eye(6) + (np.sqrt(cfg.inflation) - 1.0) * (weak.T @ weak)
        covariance = M @ covariance @ M.T
    covariance = 0.5 * (covariance + covariance.T)

    metric = []
    for scan_line, map_line in line_blocks:
        metric.append(line_to_line_residual(pose, scan_line, map_line)[2:4])
    for pts, plane in plane_blocks:
        metric.append(plane.signed_distance(pose.apply(pts)))
    stacked = np.concatenate(metric) if metric else np.zeros(1)
    rms = float(np.sqrt(np.mean(stacked ** 2)))

    return LioSolution(
        pose=pose,
        covariance=covariance,
        residual_rms=rms,
        degeneracy_flags=flags,
        n_line_matches=len(line_blocks),
        n_plane_points=int(sum(pts.shape[0] for pts, _ in plane_blocks)),
        degenerate_directions=weak,
        iterations=result.iterations,
        converged=result.converged,
        cost_trace=np.asarray(result.cost_trace, dtype=float),
    )
