"""Rotations, rigid transforms, and the line / plane parameterizations used
by the scan-matching residuals.

Quaternions are Hamilton convention, stored (w, x, y, z), and always
normalized. A ``Rotation`` maps body coordinates into the parent frame.

Infinite lines use a rotation plus two scalars (a, b): the third column of
the rotation is the line direction, and (a, b) place the line's closest
point to the origin in the plane spanned by the first two columns. That
representation has a gauge (any rotation about the direction works), which
``canonicalize_line`` fixes:

  * the direction's largest-magnitude component is positive (ties broken
    by the lowest index),
  * the rotation is the minimal geodesic rotation taking (0, 0, 1) to the
    direction (for direction = (0, 0, -1) the rotation is pi about x).

Planes are (normal, distance) with unit normal, n . x + d = 0, and the sign
fixed so d >= 0 (at d == 0 the largest-magnitude normal component is
positive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDirection

_EPS = 1e-12
# Below this angle (rad) trig ratios switch to their Taylor series.
_SMALL_ANGLE = 1e-8


def skew(v):
    """Cross-product matrix: skew(a) @ b == np.cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# raw quaternion helpers (broadcasting over leading axes)
# ---------------------------------------------------------------------------


def quat_multiply(q1, q2):
    """Hamilton product of (..., 4) quaternion arrays."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_rotate(q, v):
    """Rotate (..., 3) vectors by (..., 4) quaternions."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    if q.ndim == 1 and v.ndim == 1:
        # scalar fast path: np.cross spends microseconds on axis juggling,
        # which dominates every optimizer inner loop
        w, x, y, z = q
        vx, vy, vz = v
        tx = 2.0 * (y * vz - z * vy)
        ty = 2.0 * (z * vx - x * vz)
        tz = 2.0 * (x * vy - y * vx)
        return np.array([vx + w * tx + (y * tz - z * ty),
                         vy + w * ty + (z * tx - x * tz),
                         vz + w * tz + (x * ty - y * tx)])
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_from_rotvec(rv):
    """Exponential map to (..., 4) quaternions."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < _SMALL_ANGLE
    # sin(a/2)/a with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w, k * rv], axis=-1)


def quat_to_rotvec(q):
    """Log map of (..., 4) quaternions, principal rotation (angle <= pi)."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    vn = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(vn, q[..., :1])
    small = vn < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0 / np.where(q[..., :1] == 0.0, 1.0, q[..., :1]), angle / np.where(small, 1.0, vn))
    return k * q[..., 1:]


def quat_slerp(q0, q1, u):
    """Spherical interpolation between (..., 4) arrays, u in [0, 1]."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    u = np.asarray(u, dtype=float)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    dot = np.clip(dot, -1.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    near = sin_theta < 1e-9
    w0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / np.where(near, 1.0, sin_theta))
    w1 = np.where(near, u, np.sin(u * theta) / np.where(near, 1.0, sin_theta))
    out = w0 * q0 + w1 * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _canonical_quat(q):
    """Normalize and fix the double-cover sign (w >= 0)."""
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("zero-norm quaternion")
    q = q / n
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q[1:])):
        q = -q
    return q


def _first_nonzero_negative(v):
    for x in v:
        if x != 0.0:
            return x < 0.0
    return False


# ---------------------------------------------------------------------------
# Rotation / RigidTransform
# ---------------------------------------------------------------------------


class Rotation:
    """Unit quaternion wrapper. Immutable."""

    __slots__ = ("_q",)

    def __init__(self, quat):
        q = _canonical_quat(quat)
        q.setflags(write=False)
        object.__setattr__(self, "_q", q)

    def __setattr__(self, *a):
        raise AttributeError("Rotation is immutable")

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        # Shepperd's method: pick the largest of the four squared components.
        tr = np.trace(m)
        cand = np.array([tr, m[0, 0], m[1, 1], m[2, 2]])
        i = int(np.argmax(cand))
        if i == 0:
            s = np.sqrt(tr + 1.0) * 2.0
            q = np.array(
                [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif i == 2:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[2, 1] + m[1, 2]) / s]
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] + m[1, 2]) / s, 0.25 * s]
            )
        return cls(q)

    @property
    def quat(self):
        """(w, x, y, z) copy."""
        return np.array(self._q)

    @property
    def quat_view(self):
        """Read-only view, for hot paths."""
        return self._q

    def matrix(self):
        w, x, y, z = self._q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, v):
        return quat_rotate(self._q, v)

    def compose(self, other):
        return Rotation(quat_multiply(self._q, other._q))

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return self.compose(other)
        return self.apply(other)

    def inverse(self):
        return Rotation(quat_conjugate(self._q))

    def angle_to(self, other):
        """Geodesic angle (rad) to another rotation."""
        return float(np.linalg.norm(so3_log(self.inverse().compose(other))))

    def __repr__(self):
        return "Rotation(wxyz=%.6f, %.6f, %.6f, %.6f)" % tuple(self._q)


def so3_exp(omega):
    """Rotation-vector exponential map. Inputs above pi wrap to the
    equivalent principal rotation."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    return Rotation(quat_from_rotvec(omega))

def so3_log(rotation):
    """Principal log map (norm <= pi). At exactly pi the axis sign is fixed
    so its largest-magnitude component is positive."""
    rv = quat_to_rotvec(rotation.quat_view)
    angle = np.linalg.norm(rv)
    if angle > np.pi - 1e-9 and angle > 0.0:
        axis = rv / angle
        i = int(np.argmax(np.abs(axis)))
        if axis[i] < 0.0:
            rv = -rv
    return rv


def right_jacobian_inv(phi):
    """Inverse right Jacobian of the SO(3) exponential at phi."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    w = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + w @ w / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * w + c * (w @ w)


def right_jacobian(phi):
    """Right Jacobian of the SO(3) exponential at phi."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    w = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + w @ w / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * w + b * (w @ w)


class RigidTransform:
    """SE(3) element: x_parent = rotation @ x_child + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        object.__setattr__(self, "rotation", rotation)
        t = np.asarray(translation, dtype=float).reshape(3).copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, *a):
        raise AttributeError("RigidTransform is immutable")

    @classmethod
    def identity(cls):
        return cls(Rotation.identity(), np.zeros(3))

    def apply(self, v):
        return self.rotation.apply(v) + self.translation

    def compose(self, other):
        return RigidTransform(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return self.compose(other)
        return self.apply(other)

    def inverse(self):
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def __repr__(self):
        return "RigidTransform(t=%s)" % np.array2string(self.translation, precision=4)


def minimal_rotation_to(direction):
    """Minimal geodesic rotation taking (0, 0, 1) to a unit direction.

    The antipode (0, 0, -1) has no unique minimal rotation; by convention
    it maps to a rotation of pi about the x axis.
    """
    d = np.asarray(direction, dtype=float).reshape(3)
    c = d[2]
    axis = np.array([-d[1], d[0], 0.0])  # e3 x d
    s = np.linalg.norm(axis)
    if s < _EPS:
        if c > 0.0:
            return Rotation.identity()
        return Rotation(np.array([0.0, 1.0, 0.0, 0.0]))  # pi about x
    angle = np.arctan2(s, c)
    return so3_exp(axis / s * angle)


# ---------------------------------------------------------------------------
# infinite lines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfiniteLine:
    """Canonical infinite 3D line (see module docstring for the gauge)."""

    rotation: Rotation
    a: float
    b: float

    @property
    def direction(self):
        return self.rotation.apply(np.array([0.0, 0.0, 1.0]))

    @property
    def closest_point(self):
        """Point on the line nearest the origin."""
        r = self.rotation.matrix()
        return self.a * r[:, 0] + self.b * r[:, 1]

    def point_at(self, s):
        """Point at signed arc position s from the closest point."""
        return self.closest_point + s * self.direction

    def distance_to(self, points):
        """Unsigned distance from (..., 3) points to the line."""
        points = np.asarray(points, dtype=float)
        rel = points - self.closest_point
        d = self.direction
        along = np.tensordot(rel, d, axes=([-1], [0]))
        perp = rel - along[..., None] * d
        return np.linalg.norm(perp, axis=-1)


def canonicalize_line(point, direction):
    """Build the canonical InfiniteLine through ``point`` along ``direction``.

    Raises DegenerateDirection when the direction norm is below 1e-9.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    direction = np.asarray(direction, dtype=float).reshape(3)
    n = np.linalg.norm(direction)
    if n < 1e-9:
        raise DegenerateDirection("line direction norm %.3e below 1e-9" % n)
    d = direction / n
    i = int(np.argmax(np.abs(d)))
    if d[i] < 0.0:
        d = -d
    rot = minimal_rotation_to(d)
    c = point - np.dot(point, d) * d
    r = rot.matrix()
    return InfiniteLine(rot, float(np.dot(c, r[:, 0])), float(np.dot(c, r[:, 1])))


def transform_line(transform, line):
    """Map a line through a rigid transform, re-canonicalizing the result."""
    new_dir = transform.rotation.apply(line.direction)
    new_point = transform.apply(line.closest_point)
    return canonicalize_line(new_point, new_dir)


def line_ominus(line_i, line_j):
    """4-vector difference between two canonical lines.

    Rows: the first two components of Log(R_i^T R_j), then a_i - a_j and
    b_i - b_j.
    """
    rel = so3_log(line_i.rotation.inverse().compose(line_j.rotation))
    return np.array([rel[0], rel[1], line_i.a - line_j.a, line_i.b - line_j.b])


# ---------------------------------------------------------------------------
# planes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """Canonical plane {x : normal . x + distance = 0}, |normal| = 1,
    distance >= 0."""

    normal: np.ndarray
    distance: float

    @classmethod
    def from_normal_distance(cls, normal, distance):
        normal = np.asarray(normal, dtype=float).reshape(3)
        n = np.linalg.norm(normal)
        if n < 1e-9:
            raise DegenerateDirection("plane normal norm %.3e below 1e-9" % n)
        normal = normal / n
        distance = float(distance) / n
        if distance < 0.0 or (distance == 0.0 and normal[int(np.argmax(np.abs(normal)))] < 0.0):
            normal = -normal
            distance = -distance
        normal = normal.copy()
        normal.setflags(write=False)
        return cls(normal, distance)

    @classmethod
    def from_point_normal(cls, point, normal):
        point = np.asarray(point, dtype=float).reshape(3)
        normal = np.asarray(normal, dtype=float).reshape(3)
        return cls.from_normal_distance(normal, -float(np.dot(normal, point)))

    def signed_distance(self, points):
        points = np.asarray(points, dtype=float)
        return np.tensordot(points, self.normal, axes=([-1], [0])) + self.distance


def transform_plane(transform, plane):
    """Map a plane through a rigid transform (canonical output)."""
    n = transform.rotation.apply(plane.normal)
    d = plane.distance - float(np.dot(n, transform.translation))
    return Plane.from_normal_distance(n, d)


def pose_retract(pose, delta):
    """Perturb a pose by a 6-vector: world-frame dp, then right body-frame
    dtheta.  The manifold step shared by every pose optimization here."""
    return RigidTransform(pose.rotation @ so3_exp(delta[3:6]),
                          pose.translation + delta[0:3])


def relative_pose_residual(measured, pose_i, pose_j):
    """6-vector mismatch of ``pose_i -> pose_j`` against a measured relative
    transform: translation rows first, then the rotation log.

    Zero iff pose_i^-1 pose_j equals the measurement exactly.
    """
    err = measured.inverse().compose(pose_i.inverse().compose(pose_j))
    return np.concatenate([err.translation, so3_log(err.rotation)])


def relative_pose_jacobians(measured, pose_i, pose_j):
    """(d r / d pose_i tangent, d r / d pose_j tangent) for the residual
    above, each 6x6 in the pose_retract convention."""
    rm_t = measured.rotation.inverse().matrix()
    ri_t = pose_i.rotation.inverse().matrix()
    v = ri_t @ (pose_j.translation - pose_i.translation)
    r_rot = measured.rotation.inverse() @ pose_i.rotation.inverse() @ pose_j.rotation
    jr_inv = right_jacobian_inv(so3_log(r_rot))

    J_i = np.zeros((6, 6))
    J_i[0:3, 0:3] = -rm_t @ ri_t
    J_i[0:3, 3:6] = rm_t @ skew(v)
    J_i[3:6, 3:6] = -jr_inv @ (pose_j.rotation.inverse() @ pose_i.rotation).matrix()

    J_j = np.zeros((6, 6))
    J_j[0:3, 0:3] = rm_t @ ri_t
    J_j[3:6, 3:6] = jr_inv
    return J_i, J_j
