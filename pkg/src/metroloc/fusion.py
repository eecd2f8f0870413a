"""IMU-centric sliding-window state fusion.

The inertial chain carries the state between nodes; LiDAR and visual
alignments enter only as relative-pose observations, so their effect is
to constrain the inertial biases and damp integration drift rather than
to anchor the trajectory globally.  Nodes that leave the window are
folded into a Gaussian prior on their neighbours instead of dropped.

Node tangents follow navstate_retract: (dp world, dtheta right body,
dv, d b_a, d b_g), 15 per node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    InsufficientConstraints,
    InsufficientImuCoverage,
    NonMonotonicStamp,
    NonMonotonicTime,
    UnknownNode,
)
from .geometry import (
    RigidTransform,
    Rotation,
    minimal_rotation_to,
    relative_pose_jacobians,
    relative_pose_residual,
    right_jacobian_inv,
    so3_log,
)
from .imu import (
    GRAVITY,
    ImuBias,
    NavState,
    imu_residual,
    imu_residual_jacobians,
    navstate_local,
    navstate_retract,
    propagate_state,
    propagate_states,
)
from .solver import LmOptions, Problem, schur_complement, sqrt_info_rows

STATE_DIM = 15


@dataclass
class StateNode:
    id: int
    state: NavState
    stamp: float


@dataclass(frozen=True)
class PreintegrationFactor:
    id: int
    delta: object  # PreintegratedDelta
    node_i: int
    node_j: int


@dataclass(frozen=True)
class RelativePoseFactor:
    id: int
    source: str  # "lio" | "vio"
    transform: RigidTransform
    covariance: np.ndarray  # 6x6 in (dp, dtheta) order
    node_i: int
    node_j: int


@dataclass(frozen=True)
class MarginalPriorFactor:
    """Quadratic prior |A (x (-) x_ref) + b|^2 + constant on a node set.

    ``x_ref`` are the linearization states at creation time; the constant
    keeps the graph cost comparable across marginalizations.
    """

    id: int
    node_ids: Tuple[int, ...]
    states: Dict[int, NavState]
    sqrt_info: np.ndarray  # (rows, 15 * len(node_ids))
    rhs: np.ndarray
    constant: float = 0.0


@dataclass(frozen=True)
class FusionConfig:
    window: int = 20  # nodes kept by marginalize_oldest
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    # random-walk densities weighting the bias-difference residual rows
    accel_walk: float = 1e-4
    gyro_walk: float = 1e-4
    degenerate_inflation: float = 100.0  # covariance scaling in flagged directions
    lm: LmOptions = field(default_factory=lambda: LmOptions(
        max_iters=50, step_tol=1e-12, cost_tol=1e-16))

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("window of %d nodes, need at least 3" % self.window)


@dataclass
class FusionResult:
    cost: float
    cost_trace: np.ndarray
    converged: bool  # False marks a cost plateau; states hold the last iterate
    iterations: int
    covariances: Dict[int, np.ndarray]  # node id -> 15x15 marginal


def initial_state_at_rest(stamp, samples, gravity=GRAVITY):
    """Rest initialization from a stationary sample run: zero velocity and
    biases, and the minimal tilt mapping the mean specific force onto
    gravity, so no twist is invented about the vertical."""
    acc = np.mean([np.asarray(s.accel, dtype=float) for s in samples], axis=0)
    n = np.linalg.norm(acc)
    if n < 1e-6:
        raise ValueError("mean specific force %.2e is too small to level" % n)
    g = np.asarray(gravity, dtype=float)
    r = minimal_rotation_to(g / np.linalg.norm(g)) @ minimal_rotation_to(acc / n).inverse()
    return NavState(float(stamp), np.zeros(3), np.zeros(3), r, ImuBias())


class FusionGraph:
    """Single-writer factor graph over NavState nodes."""

    def __init__(self, config: Optional[FusionConfig] = None):
        self.config = config or FusionConfig()
        self.nodes: List[StateNode] = []
        self.factors: List[object] = []
        self._by_id: Dict[int, StateNode] = {}
        self._next_node_id = 0
        self._next_factor_id = 0

    # -- construction --------------------------------------------------------

    def node(self, node_id) -> StateNode:
        if node_id not in self._by_id:
            raise UnknownNode("node %r does not exist" % (node_id,))
        return self._by_id[node_id]

    def add_node(self, stamp, initial: Optional[NavState] = None,
                 samples: Sequence = ()) -> int:
        """Append a node; without an explicit state the seed is the last
        node's state propagated through ``samples``."""
        stamp = float(stamp)
        if self.nodes and stamp <= self.nodes[-1].stamp:
            raise NonMonotonicStamp(
                "stamp %.6f not after %.6f" % (stamp, self.nodes[-1].stamp))
        if initial is None:
            if not self.nodes:
                raise ValueError("the first node needs an explicit state")
            if not samples:
                raise ValueError("cannot seed a node without IMU samples")
            seed = propagate_state(self.nodes[-1].state, samples, self.config.gravity)
            if abs(seed.timestamp - stamp) > 1e-6:
                raise InsufficientImuCoverage(
                    "samples end at %.6f, node is at %.6f" % (seed.timestamp, stamp))
            state = replace(seed, timestamp=stamp)
        else:
            state = replace(initial, timestamp=stamp)
        node = StateNode(self._next_node_id, state, stamp)
        self._next_node_id += 1
        self.nodes.append(node)
        self._by_id[node.id] = node
        return node.id

    def _new_factor(self, factor):
        self.factors.append(factor)
        self._next_factor_id += 1
        return factor.id

    def add_preintegration_factor(self, node_i, node_j, delta) -> int:
        a, b = self.node(node_i), self.node(node_j)
        if node_i >= node_j:
            raise ValueError("need node_i < node_j, got %r, %r" % (node_i, node_j))
        if abs((b.stamp - a.stamp) - delta.dt_total) > 1e-6:
            raise NonMonotonicTime(
                "delta spans %.6f s but nodes are %.6f s apart"
                % (delta.dt_total, b.stamp - a.stamp))
        return self._new_factor(PreintegrationFactor(
            self._next_factor_id, delta, node_i, node_j))

    def add_relative_pose_factor(self, source, node_i, node_j, transform,
                                 covariance) -> int:
        self.node(node_i), self.node(node_j)
        if node_i >= node_j:
            raise ValueError("need node_i < node_j, got %r, %r" % (node_i, node_j))
        cov = 0.5 * (np.asarray(covariance, dtype=float)
                     + np.asarray(covariance, dtype=float).T).reshape(6, 6)
        return self._new_factor(RelativePoseFactor(
            self._next_factor_id, str(source), transform, cov, node_i, node_j))

    def add_prior(self, node_id, information, mean: Optional[NavState] = None) -> int:
        """Gaussian prior on one node; the usual gauge anchor.

        ``information`` is a 15x15 matrix or a scalar multiple of identity;
        ``mean`` defaults to the node's current state."""
        node = self.node(node_id)
        info = np.asarray(information, dtype=float)
        if info.shape == ():
            info = np.eye(STATE_DIM) * float(info)
        info = 0.5 * (info + info.T)
        delta0 = (np.zeros(STATE_DIM) if mean is None
                  else navstate_local(node.state, mean))
        A, b = sqrt_info_rows(info, -info @ delta0)
        return self._new_factor(MarginalPriorFactor(
            self._next_factor_id, (node_id,), {node_id: node.state}, A, b))

    # -- residual blocks -----------------------------------------------------

    def _factor_nodes(self, factor) -> Tuple[int, ...]:
        if isinstance(factor, MarginalPriorFactor):
            return factor.node_ids
        return (factor.node_i, factor.node_j)

    def _preint_sqrt_info(self, delta):
        cov9 = 0.5 * (delta.covariance[0:9, 0:9] + delta.covariance[0:9, 0:9].T)
        L = np.linalg.cholesky(np.linalg.inv(cov9))
        S = np.zeros((STATE_DIM, STATE_DIM))
        S[0:9, 0:9] = L.T
        dt = max(delta.dt_total, 1e-9)
        S[9:12, 9:12] = np.eye(3) / (self.config.accel_walk * np.sqrt(dt))
        S[12:15, 12:15] = np.eye(3) / (self.config.gyro_walk * np.sqrt(dt))
        return S

    def _block_for(self, factor):
        if isinstance(factor, PreintegrationFactor):
            ki, kj = "n%d" % factor.node_i, "n%d" % factor.node_j
            S = self._preint_sqrt_info(factor.delta)
            delta, grav = factor.delta, self.config.gravity

            def fn(values, delta=delta, ki=ki, kj=kj, S=S, grav=grav):
                return S @ imu_residual(delta, values[ki], values[kj], grav)

            def jac(values, delta=delta, ki=ki, kj=kj, S=S, grav=grav):
                J_i, J_j = imu_residual_jacobians(delta, values[ki], values[kj], grav)
                return {ki: S @ J_i, kj: S @ J_j}

            return [ki, kj], fn, jac

        if isinstance(factor, RelativePoseFactor):
            ki, kj = "n%d" % factor.node_i, "n%d" % factor.node_j
            Lt = np.linalg.cholesky(np.linalg.inv(factor.covariance)).T
            meas = factor.transform

            def fn(values, meas=meas, ki=ki, kj=kj, Lt=Lt):
                return Lt @ relative_pose_residual(
                    meas, values[ki].pose(), values[kj].pose())

            def jac(values, meas=meas, ki=ki, kj=kj, Lt=Lt):
                J_i6, J_j6 = relative_pose_jacobians(
                    meas, values[ki].pose(), values[kj].pose())
                J_i = np.zeros((6, STATE_DIM))
                J_j = np.zeros((6, STATE_DIM))
                J_i[:, 0:6] = J_i6
                J_j[:, 0:6] = J_j6
                return {ki: Lt @ J_i, kj: Lt @ J_j}

            return [ki, kj], fn, jac

        if isinstance(factor, MarginalPriorFactor):
            keys = ["n%d" % nid for nid in factor.node_ids]

            def fn(values, factor=factor, keys=keys):
                d = np.concatenate([
                    navstate_local(factor.states[nid], values[k])
                    for nid, k in zip(factor.node_ids, keys)])
                return factor.sqrt_info @ d + factor.rhs

            def jac(values, factor=factor, keys=keys):
                out = {}
                for idx, (nid, k) in enumerate(zip(factor.node_ids, keys)):
                    dtheta = so3_log(factor.states[nid].orientation.inverse()
                                     @ values[k].orientation)
                    D = np.eye(STATE_DIM)
                    D[3:6, 3:6] = right_jacobian_inv(dtheta)
                    cols = slice(STATE_DIM * idx, STATE_DIM * (idx + 1))
                    out[k] = factor.sqrt_info[:, cols] @ D
                return out

            return keys, fn, jac

        raise TypeError("unknown factor %r" % (factor,))

    def _build_problem(self, nodes=None, factors=None):
        problem = Problem()
        for node in (nodes if nodes is not None else self.nodes):
            problem.add_variable("n%d" % node.id, node.state, STATE_DIM,
                                 navstate_retract)
        const = 0.0
        for factor in (factors if factors is not None else self.factors):
            keys, fn, jac = self._block_for(factor)
            problem.add_block(keys, fn, jac=jac)
            if isinstance(factor, MarginalPriorFactor):
                const += factor.constant
        return problem, const

    def factor_residual(self, factor_id) -> np.ndarray:
        """Raw (unwhitened for relative-pose / preintegration) residual of a
        factor at the current states; diagnostics only."""
        for factor in self.factors:
            if factor.id == factor_id:
                break
        else:
            raise KeyError("no factor %r" % (factor_id,))
        if isinstance(factor, RelativePoseFactor):
            return relative_pose_residual(factor.transform,
                                          self.node(factor.node_i).state.pose(),
                                          self.node(factor.node_j).state.pose())
        if isinstance(factor, PreintegrationFactor):
            return imu_residual(factor.delta, self.node(factor.node_i).state,
                                self.node(factor.node_j).state, self.config.gravity)
        keys, fn, _ = self._block_for(factor)
        return fn({k: self.node(nid).state
                   for k, nid in zip(keys, factor.node_ids)})

    def cost(self) -> float:
        problem, const = self._build_problem()
        return problem.cost() + const

    # -- estimation ----------------------------------------------------------

    def optimize(self, covariances: bool = True) -> FusionResult:
        """Re-estimate all node states; biases move through the
        preintegration bias rows.  Non-convergence is flagged on the result,
        with the last iterate kept."""
        if not any(not isinstance(f, MarginalPriorFactor) for f in self.factors):
            raise InsufficientConstraints("no factors beyond priors")
        problem, const = self._build_problem()
        result = problem.solve(self.config.lm)
        for node in self.nodes:
            node.state = result.values["n%d" % node.id]
        covs: Dict[int, np.ndarray] = {}
        if covariances:
            H = 0.5 * (result.hessian + result.hessian.T)
            try:
                full = np.linalg.inv(H)
                for node in self.nodes:
                    o, d = result.offsets["n%d" % node.id]
                    covs[node.id] = full[o:o + d, o:o + d]
            except np.linalg.LinAlgError:
                covs = {}
        return FusionResult(
            cost=result.cost + const,
            cost_trace=np.asarray(result.cost_trace, dtype=float) + const,
            converged=result.converged,
            iterations=result.iterations,
            covariances=covs,
        )

    def marginalize_oldest(self, keep: int) -> None:
        """Fold the oldest nodes beyond ``keep`` into a prior on their
        neighbours (Schur complement at the current linearization).

        The stored constant makes the graph cost at the current estimate
        invariant under the elimination."""
        if keep < 1:
            raise ValueError("keep must be positive")
        if len(self.nodes) <= keep:
            return
        split = len(self.nodes) - keep
        drop = sorted(n.id for n in self.nodes[:split])
        drop_set = set(drop)
        involved = [f for f in self.factors
                    if drop_set & set(self._factor_nodes(f))]
        blanket = sorted({nid for f in involved
                          for nid in self._factor_nodes(f)} - drop_set)
        if involved and blanket:
            ordered = [self._by_id[nid] for nid in drop + blanket]
            sub, sub_const = self._build_problem(nodes=ordered, factors=involved)
            c0 = sub.cost() + sub_const
            H, g, offsets = sub.normal_equations()
            elim = np.concatenate([
                offsets["n%d" % nid][0] + np.arange(STATE_DIM) for nid in drop])
            H2, g2, _ = schur_complement(H, g, elim)
            A, b = sqrt_info_rows(H2, g2)
            const = max(c0 - float(b @ b), 0.0)
            prior = MarginalPriorFactor(
                self._next_factor_id, tuple(blanket),
                {nid: self._by_id[nid].state for nid in blanket}, A, b, const)
        else:
            prior = None
        if involved:
            involved_ids = {id(f) for f in involved}
            self.factors = [f for f in self.factors if id(f) not in involved_ids]
        if prior is not None:
            self._new_factor(prior)
        for node in self.nodes[:split]:
            del self._by_id[node.id]
        self.nodes = self.nodes[split:]

    def emit_odometry(self, samples: Sequence = ()) -> List[NavState]:
        """IMU-rate states dead-reckoned from the latest node with its bias
        estimate; with no samples, just the latest node state."""
        if not self.nodes:
            raise InsufficientConstraints("no nodes to emit from")
        state = self.nodes[-1].state
        samples = list(samples)
        if not samples:
            return [state]
        ts = np.array([s.timestamp for s in samples], dtype=float)
        acc = np.array([s.accel for s in samples], dtype=float)
        gyr = np.array([s.gyro for s in samples], dtype=float)
        if abs(ts[0] - state.timestamp) > 1e-6:
            raise InsufficientImuCoverage(
                "samples start at %.6f but the node is at %.6f"
                % (ts[0], state.timestamp))
        if ts.size > 1 and np.any(np.diff(ts) <= 0.0):
            raise NonMonotonicTime("odometry samples must be increasing")
        pos, vel, quat = propagate_states(state, ts, acc, gyr, self.config.gravity)
        return [NavState(float(ts[k]), pos[k].copy(), vel[k].copy(),
                         Rotation(quat[k]), state.bias)
                for k in range(ts.size)]
