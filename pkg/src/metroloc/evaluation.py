"""Trajectory comparison: stamp association, alignment, and ATE.

Estimates and references rarely share a clock grid, so poses are paired
by nearest stamp within a gap budget first. Alignment is either the
odometry-style first-pose gauge fix or a closed-form rigid least-squares
fit of the matched positions; translational and rotational errors are
then aggregated as RMSE over the matched pairs.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .dataset_io import TimedPose, _as_timed_pose
from .errors import InvalidParams, NoOverlap
from .geometry import RigidTransform, Rotation

ALIGNMENT_MODES = ("first_pose", "umeyama_se3")


class Association(NamedTuple):
    """Stamp-matched and aligned pose pairs, est[i] against gt[i]."""

    est: List[TimedPose]
    gt: List[TimedPose]
    mode: str
    max_stamp_gap: float


@dataclass
class EvalReport:
    """ATE summary plus the per-pose error series it was reduced from."""

    ate_translational: float
    ate_rotational: float  # degrees
    alignment: str
    matched: int
    max_stamp_gap: float
    stamps: np.ndarray = field(repr=False)
    trans_errors: np.ndarray = field(repr=False)
    rot_errors: np.ndarray = field(repr=False)  # degrees

    def to_dict(self) -> dict:
        return {
            "ate_translational_m": self.ate_translational,
            "ate_rotational_deg": self.ate_rotational,
            "alignment": self.alignment,
            "matched_poses": self.matched,
            "max_stamp_gap_s": self.max_stamp_gap,
        }


def _coerce(trajectory) -> List[TimedPose]:
    out = [_as_timed_pose(entry) for entry in trajectory]
    if any(b.stamp <= a.stamp for a, b in zip(out, out[1:])):
        out.sort(key=lambda tp: tp.stamp)
    return out


def _associate(est, gt, max_gap):
    """One-to-one nearest-stamp pairing, smallest gaps claimed first."""
    gt_stamps = np.array([tp.stamp for tp in gt])
    cands = []
    for i, tp in enumerate(est):
        j = int(np.searchsorted(gt_stamps, tp.stamp))
        for k in (j - 1, j):
            if 0 <= k < len(gt):
                gap = abs(gt_stamps[k] - tp.stamp)
                if gap <= max_gap:
                    cands.append((gap, i, k))
    cands.sort()
    used_i, used_k, pairs, worst = set(), set(), [], 0.0
    for gap, i, k in cands:
        if i in used_i or k in used_k:
            continue
        used_i.add(i)
        used_k.add(k)
        pairs.append((i, k))
        worst = max(worst, gap)
    pairs.sort()
    return pairs, worst


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid motion taking src points onto dst (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    s[2, 2] = np.sign(np.linalg.det(u @ vt))
    r = u @ s @ vt
    return RigidTransform(Rotation.from_matrix(r), mu_d - r @ mu_s)


def associate_and_align(est, gt, mode: str = "first_pose",
                        max_gap: float = 0.02) -> Association:
    """Pair trajectories by stamp and move the estimate into the
    reference frame.

    ``first_pose`` premultiplies by gt_0 * est_0^-1 (odometry comparison:
    both runs start at the same pose); ``umeyama_se3`` fits the rigid
    motion minimizing matched position RMSE. Raises NoOverlap with fewer
    than two matches inside ``max_gap``.
    """
    if mode not in ALIGNMENT_MODES:
        raise InvalidParams("unknown alignment mode %r" % mode)
    est = _coerce(est)
    gt = _coerce(gt)
    pairs, worst = _associate(est, gt, float(max_gap))
    if len(pairs) < 2:
        raise NoOverlap(
            "%d stamp matches within %.3f s" % (len(pairs), max_gap))
    est_m = [est[i] for i, _ in pairs]
    gt_m = [gt[k] for _, k in pairs]
    if mode == "first_pose":
        correction = gt_m[0].pose.compose(est_m[0].pose.inverse())
    else:
        correction = umeyama_alignment(
            np.array([tp.pose.translation for tp in est_m]),
            np.array([tp.pose.translation for tp in gt_m]))
    est_m = [TimedPose(tp.stamp, correction.compose(tp.pose))
             for tp in est_m]
    return Association(est_m, gt_m, mode, worst)


def ate(est, gt, mode: str = "first_pose",
        max_gap: float = 0.02) -> EvalReport:
    """Absolute trajectory error after association and alignment.

    Translational part: RMSE of position differences in meters.
    Rotational part: RMSE of the geodesic angle of gt^-1 * est, degrees.
    """
    assoc = associate_and_align(est, gt, mode, max_gap)
    trans = np.array([
        np.linalg.norm(e.pose.translation - g.pose.translation)
        for e, g in zip(assoc.est, assoc.gt)])
    rot = np.array([
        np.degrees(g.pose.rotation.angle_to(e.pose.rotation))
        for e, g in zip(assoc.est, assoc.gt)])
    return EvalReport(
        ate_translational=float(np.sqrt(np.mean(trans ** 2))),
        ate_rotational=float(np.sqrt(np.mean(rot ** 2))),
        alignment=assoc.mode,
        matched=len(assoc.est),
        max_stamp_gap=assoc.max_stamp_gap,
        stamps=np.array([tp.stamp for tp in assoc.est]),
        trans_errors=trans,
        rot_errors=rot,
    )
