"""Inertial state types, midpoint preintegration, and the 15-row
preintegration residual.

Conventions:
  * world frame is z-up, gravity defaults to (0, 0, +9.81) m/s^2,
  * accelerometers measure specific force f = R^T (a + g) + b_a + noise,
  * NavState.orientation maps body coordinates into world,
  * tangent ordering everywhere is (position, velocity, rotation,
    accel bias, gyro bias), so the delta covariance is 15x15 in that order.

The preintegrated quantities (alpha, beta, gamma) are the gravity-free
position / velocity / rotation increments expressed in the body frame of
the interval's first sample. A 9x6 Jacobian of (alpha, beta, gamma) with
respect to the linearization biases supports first-order re-correction
without re-integrating.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyStream, InsufficientImuCoverage, NonMonotonicTime, TimestampMismatch
from .geometry import (
    Rotation,
    quat_from_rotvec,
    quat_multiply,
    quat_rotate,
    right_jacobian,
    skew,
    so3_exp,
)

GRAVITY = np.array([0.0, 0.0, 9.81])

# Bias excursions past this (rad/s or m/s^2) make the first-order
# correction of the deltas untrustworthy.
BIAS_CORRECTION_WARN = 0.1


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    accel: np.ndarray  # specific force, m/s^2
    gyro: np.ndarray  # rad/s


@dataclass(frozen=True)
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self):
        return np.concatenate([self.accel, self.gyro])


@dataclass(frozen=True)
class ImuNoiseConfig:
    """Continuous-time noise densities (per sqrt(Hz)) and bias random walks."""

    accel_noise: float = 0.02
    gyro_noise: float = 0.002
    accel_walk: float = 1e-4
    gyro_walk: float = 1e-4
    rate: float = 200.0


@dataclass(frozen=True)
class NavState:
    timestamp: float
    position: np.ndarray
    velocity: np.ndarray
    orientation: Rotation
    bias: ImuBias = field(default_factory=ImuBias)

    def pose(self):
        from .geometry import RigidTransform

        return RigidTransform(self.orientation, self.position)


@dataclass(frozen=True)
class PreintegratedDelta:
    """Gravity-free increments over [t_i, t_j], in frame i."""

    alpha: np.ndarray  # position increment, m
    beta: np.ndarray  # velocity increment, m/s
    gamma: Rotation  # rotation increment
    dt_total: float
    covariance: np.ndarray  # 15x15, (alpha, beta, theta, b_a, b_g)
    jac_bias: np.ndarray  # 9x6, d(alpha, beta, theta) / d(b_a, b_g)
    linearization_bias: ImuBias


def _pack(samples):
    n = len(samples)
    ts = np.empty(n)
    acc = np.empty((n, 3))
    gyr = np.empty((n, 3))
    for k, s in enumerate(samples):
        ts[k] = s.timestamp
        acc[k] = s.accel
        gyr[k] = s.gyro
    return ts, acc, gyr


def _check_stream(ts):
    if ts.size == 0:
        raise EmptyStream("no IMU samples")
    dt = np.diff(ts)
    if ts.size > 1 and np.any(dt <= 0.0):
        k = int(np.argmax(dt <= 0.0))
        raise NonMonotonicTime("IMU stamps not increasing at index %d" % (k + 1))


def preintegrate(samples, bias, noise):
    """Midpoint-rule preintegration of an IMU sample run.

    Args:
        samples: sequence of ImuSample with strictly increasing stamps
            (at least two).
        bias: ImuBias used as the linearization point.
        noise: ImuNoiseConfig driving the covariance propagation.

    Returns:
        PreintegratedDelta. Covariance is symmetric positive semidefinite
        and grows monotonically with integration time.
    """
    ts, acc, gyr = _pack(samples)
    _check_stream(ts)
    if ts.size < 2:
        raise EmptyStream("preintegration needs at least two samples")

    ba = np.asarray(bias.accel, dtype=float)
    bg = np.asarray(bias.gyro, dtype=float)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    q = np.array([1.0, 0.0, 0.0, 0.0])
    cov = np.zeros((15, 15))
    jac = np.zeros((9, 6))

    sa2 = noise.accel_noise**2
    sg2 = noise.gyro_noise**2
    swa2 = noise.accel_walk**2
    swg2 = noise.gyro_walk**2

    eye = np.eye(3)
    for k in range(ts.size - 1):
        dt = ts[k + 1] - ts[k]
        w = 0.5 * (gyr[k] + gyr[k + 1]) - bg
        dq = quat_from_rotvec(w * dt)
        q_next = quat_multiply(q, dq)
        q_next = q_next / np.linalg.norm(q_next)

        f0 = acc[k] - ba
        f1 = acc[k + 1] - ba
        r0 = Rotation(q).matrix()
        r1 = Rotation(q_next).matrix()
        a0 = r0 @ f0
        a1 = r1 @ f1
        am = 0.5 * (a0 + a1)

        alpha_next = alpha + beta * dt + 0.5 * am * dt * dt
        beta_next = beta + am * dt

        # linearized step transition in (alpha, beta, theta, b_a, b_g)
        rdq_t = Rotation(dq).matrix().T
        jr = right_jacobian(w * dt)
        m_theta = -0.5 * (r0 @ skew(f0) + r1 @ skew(f1) @ rdq_t)
        m_ba = -0.5 * (r0 + r1)
        m_bg = 0.5 * (r1 @ skew(f1)) @ jr * dt

        F = np.eye(15)
        F[0:3, 3:6] = eye * dt
        F[0:3, 6:9] = 0.5 * dt * dt * m_theta
        F[0:3, 9:12] = 0.5 * dt * dt * m_ba
        F[0:3, 12:15] = 0.5 * dt * dt * m_bg
        F[3:6, 6:9] = dt * m_theta
        F[3:6, 9:12] = dt * m_ba
        F[3:6, 12:15] = dt * m_bg
        F[6:9, 6:9] = rdq_t
        F[6:9, 12:15] = -jr * dt

        # noise: (n_a0, n_g0, n_a1, n_g1, walk_a, walk_g)
        G = np.zeros((15, 18))
        G[0:3, 0:3] = 0.25 * dt * dt * r0
        G[0:3, 6:9] = 0.25 * dt * dt * r1
        G[0:3, 3:6] = G[0:3, 9:12] = -0.125 * dt**3 * (r1 @ skew(f1)) @ jr
        G[3:6, 0:3] = 0.5 * dt * r0
        G[3:6, 6:9] = 0.5 * dt * r1
        G[3:6, 3:6] = G[3:6, 9:12] = -0.25 * dt * dt * (r1 @ skew(f1)) @ jr
        G[6:9, 3:6] = G[6:9, 9:12] = 0.5 * dt * jr
        G[9:12, 12:15] = eye * dt
        G[12:15, 15:18] = eye * dt

        qd = np.concatenate(
            [
                np.full(3, sa2 / dt),
                np.full(3, sg2 / dt),
                np.full(3, sa2 / dt),
                np.full(3, sg2 / dt),
                np.full(3, swa2 / dt),
                np.full(3, swg2 / dt),
            ]
        )
        cov = F @ cov @ F.T + (G * qd) @ G.T
        cov = 0.5 * (cov + cov.T)
        jac = F[0:9, 0:9] @ jac + F[0:9, 9:15]

        alpha, beta, q = alpha_next, beta_next, q_next

    return PreintegratedDelta(
        alpha=alpha,
        beta=beta,
        gamma=Rotation(q),
        dt_total=float(ts[-1] - ts[0]),
        covariance=cov,
        jac_bias=jac,
        linearization_bias=ImuBias(ba.copy(), bg.copy()),
    )


def correct_for_bias(delta, new_bias):
    """First-order re-correction of a delta to a new bias estimate.

    Warns when the excursion from the linearization bias exceeds
    BIAS_CORRECTION_WARN; the result is then increasingly approximate.
    """
    dba = np.asarray(new_bias.accel, dtype=float) - delta.linearization_bias.accel
    dbg = np.asarray(new_bias.gyro, dtype=float) - delta.linearization_bias.gyro
    exc = max(np.max(np.abs(dba)), np.max(np.abs(dbg)))
    if exc > BIAS_CORRECTION_WARN:
        warnings.warn(
            "bias correction of %.3f exceeds first-order validity (%.2f)"
            % (exc, BIAS_CORRECTION_WARN),
            RuntimeWarning,
            stacklevel=2,
        )
    db = np.concatenate([dba, dbg])
    j = delta.jac_bias
    alpha = delta.alpha + j[0:3] @ db
    beta = delta.beta + j[3:6] @ db
    gamma = delta.gamma.compose(so3_exp(j[6:9, 3:6] @ dbg))
    return PreintegratedDelta(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        dt_total=delta.dt_total,
        covariance=delta.covariance,
        jac_bias=delta.jac_bias,
        linearization_bias=ImuBias(
            np.asarray(new_bias.accel, dtype=float).copy(),
            np.asarray(new_bias.gyro, dtype=float).copy(),
        ),
    )


def imu_residual(delta, state_i, state_j, gravity=GRAVITY):
    """15-row preintegration residual between two states.

    Rows: position, velocity, orientation (twice the vector part of
    q_i^-1 * q_j * gamma^-1), accel-bias difference, gyro-bias difference.
    The delta is first re-corrected to state_i's bias.
    """
    dt = delta.dt_total
    if abs((state_j.timestamp - state_i.timestamp) - dt) > 1e-6:
        raise TimestampMismatch(
            "delta spans %.6f s but states are %.6f s apart"
            % (dt, state_j.timestamp - state_i.timestamp)
        )
    d = correct_for_bias(delta, state_i.bias)
    g = np.asarray(gravity, dtype=float)
    ri_t = state_i.orientation.matrix().T
    r_alpha = ri_t @ (
        state_j.position - state_i.position + 0.5 * g * dt * dt - state_i.velocity * dt
    ) - d.alpha
    r_beta = ri_t @ (state_j.velocity + g * dt - state_i.velocity) - d.beta
    qe = quat_multiply(
        quat_multiply(state_i.orientation.inverse().quat_view, state_j.orientation.quat_view),
        d.gamma.inverse().quat_view,
    )
    if qe[0] < 0.0:
        qe = -qe
    r_gamma = 2.0 * qe[1:]
    r_ba = state_j.bias.accel - state_i.bias.accel
    r_bg = state_j.bias.gyro - state_i.bias.gyro
    return np.concatenate([r_alpha, r_beta, r_gamma, r_ba, r_bg])


def navstate_retract(state, delta):
    """Perturb a NavState by a 15-vector tangent.

    Ordering: (dp world, dtheta right, dv, d b_a, d b_g); the pose block
    matches geometry.pose_retract.
    """
    delta = np.asarray(delta, dtype=float)
    return NavState(
        state.timestamp,
        state.position + delta[0:3],
        state.velocity + delta[6:9],
        state.orientation @ so3_exp(delta[3:6]),
        ImuBias(state.bias.accel + delta[9:12], state.bias.gyro + delta[12:15]),
    )


def navstate_local(ref, state):
    """15-vector tangent taking ``ref`` to ``state`` (navstate_retract inverse,
    timestamps ignored)."""
    from .geometry import so3_log

    return np.concatenate(
        [
            state.position - ref.position,
            so3_log(ref.orientation.inverse() @ state.orientation),
            state.velocity - ref.velocity,
            state.bias.accel - ref.bias.accel,
            state.bias.gyro - ref.bias.gyro,
        ]
    )


def imu_residual_jacobians(delta, state_i, state_j, gravity=GRAVITY):
    """Derivatives of imu_residual in the navstate_retract tangents.

    Returns (J_i, J_j), each 15x15. Exact for the residual as implemented,
    including the first-order bias re-correction and the quaternion
    vector-part rotation rows.
    """
    g = np.asarray(gravity, dtype=float)
    dt = delta.dt_total
    jb = delta.jac_bias
    ri_t = state_i.orientation.matrix().T

    dbg0 = state_i.bias.gyro - delta.linearization_bias.gyro
    v0 = jb[6:9, 3:6] @ dbg0
    gamma_c = delta.gamma.compose(so3_exp(v0))
    gm = gamma_c.matrix()

    qe = quat_multiply(
        quat_multiply(state_i.orientation.inverse().quat_view, state_j.orientation.quat_view),
        gamma_c.inverse().quat_view,
    )
    if qe[0] < 0.0:
        qe = -qe
    # d(2 vec(qe * quat(phi)))/d phi, exact at finite residual
    W = qe[0] * np.eye(3) + skew(qe[1:])
    re_t = Rotation(qe).matrix().T

    u = state_j.position - state_i.position + 0.5 * g * dt * dt - state_i.velocity * dt
    w = state_j.velocity + g * dt - state_i.velocity

    J_i = np.zeros((15, 15))
    J_j = np.zeros((15, 15))

    J_i[0:3, 0:3] = -ri_t
    J_i[0:3, 3:6] = skew(ri_t @ u)
    J_i[0:3, 6:9] = -ri_t * dt
    J_i[0:3, 9:12] = -jb[0:3, 0:3]
    J_i[0:3, 12:15] = -jb[0:3, 3:6]
    J_j[0:3, 0:3] = ri_t

    J_i[3:6, 3:6] = skew(ri_t @ w)
    J_i[3:6, 6:9] = -ri_t
    J_i[3:6, 9:12] = -jb[3:6, 0:3]
    J_i[3:6, 12:15] = -jb[3:6, 3:6]
    J_j[3:6, 6:9] = ri_t

    J_i[6:9, 3:6] = -W @ re_t
    J_i[6:9, 12:15] = -W @ gm @ right_jacobian(v0) @ jb[6:9, 3:6]
    J_j[6:9, 3:6] = W @ gm

    J_i[9:12, 9:12] = -np.eye(3)
    J_j[9:12, 9:12] = np.eye(3)
    J_i[12:15, 12:15] = -np.eye(3)
    J_j[12:15, 12:15] = np.eye(3)
    return J_i, J_j


def propagate_state(state, samples, gravity=GRAVITY):
    """Dead-reckon a NavState through IMU samples (midpoint rule).

    The first sample must sit at the state's timestamp (1e-6 tolerance).
    Returns the state at the last sample time; bias is carried unchanged.
    """
    ts, acc, gyr = _pack(samples)
    _check_stream(ts)
    if abs(ts[0] - state.timestamp) > 1e-6:
        raise InsufficientImuCoverage(
            "samples start at %.6f but state is at %.6f" % (ts[0], state.timestamp)
        )
    traj = propagate_states(state, ts, acc, gyr, gravity)
    p, v, q = traj[0][-1], traj[1][-1], traj[2][-1]
    return NavState(float(ts[-1]), p.copy(), v.copy(), Rotation(q), state.bias)


def propagate_states(state, ts, acc, gyr, gravity=GRAVITY):
    """Vector version of propagate_state keeping every intermediate state.

    Returns (positions, velocities, quaternions) arrays aligned with ts;
    row 0 is the input state.
    """
    g = np.asarray(gravity, dtype=float)
    ba = state.bias.accel
    bg = state.bias.gyro
    n = ts.size
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    quat = np.empty((n, 4))
    pos[0] = state.position
    vel[0] = state.velocity
    quat[0] = state.orientation.quat_view
    for k in range(n - 1):
        dt = ts[k + 1] - ts[k]
        w = 0.5 * (gyr[k] + gyr[k + 1]) - bg
        dq = quat_from_rotvec(w * dt)
        q_next = quat_multiply(quat[k], dq)
        q_next /= np.linalg.norm(q_next)
        a0 = quat_rotate(quat[k], acc[k] - ba)
        a1 = quat_rotate(q_next, acc[k + 1] - ba)
        aw = 0.5 * (a0 + a1) - g
        pos[k + 1] = pos[k] + vel[k] * dt + 0.5 * aw * dt * dt
        vel[k + 1] = vel[k] + aw * dt
        quat[k + 1] = q_next
    return pos, vel, quat
