"""Synthetic metro tunnel: world geometry, rail-constrained trajectories,
and IMU / LiDAR / camera-track synthesis with exact ground truth.

The world is a set of planar rectangles (walls, bed, ceiling, rail heads,
portal frames) laid out along a piecewise straight-and-arc centerline;
curved sections are tessellated into facets so every ray cast is exact
against the surfaces the world actually owns. All randomness is drawn
from generators seeded per (seed, frame), so identical inputs give
byte-identical datasets.

Frames: world z up, track bed at z = 0; the body frame rides the
centerline at the configured mount height with x forward and y left,
which is also the LiDAR convention used by the feature extractor.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .dataset_io import (
    DatasetManifest,
    SensorRig,
    save_manifest,
    save_trajectory,
    write_imu_csv,
    write_scan_bin,
    write_tracks_csv,
)
from .errors import InvalidParams
from .features import LidarScan
from .geometry import RigidTransform, Rotation
from .imu import GRAVITY, ImuBias, ImuSample, NavState
from .vio import FeatureTrack

_EPS = 1e-12


def _yaw(heading) -> Rotation:
    return Rotation(np.array([math.cos(heading / 2.0), 0.0, 0.0,
                              math.sin(heading / 2.0)]))


# ---------------------------------------------------------------------------
# centerline
# ---------------------------------------------------------------------------


class Centerline:
    """C1 chain of straight and circular-arc segments in the ground plane.

    Each segment starts where and with the heading the previous one ended,
    so the tangent is continuous while curvature may step.
    """

    def __init__(self, segments: Sequence[Tuple]):
        if not segments:
            raise InvalidParams("centerline needs at least one segment")
        s0, x0, h0, kappa = [0.0], [np.zeros(2)], [0.0], []
        for seg in segments:
            kind, length = seg[0], float(seg[1])
            if length <= 0.0:
                raise InvalidParams("segment length %r" % length)
            if kind == "straight":
                k = 0.0
            elif kind == "arc":
                radius = float(seg[2])
                if radius == 0.0:
                    raise InvalidParams("arc radius must be nonzero")
                k = 1.0 / radius
            else:
                raise InvalidParams("unknown segment kind %r" % (kind,))
            kappa.append(k)
            h = h0[-1]
            if k == 0.0:
                x = x0[-1] + length * np.array([math.cos(h), math.sin(h)])
                h_end = h
            else:
                h_end = h + k * length
                x = x0[-1] + (self._left(h) - self._left(h_end)) / k
            s0.append(s0[-1] + length)
            x0.append(x)
            h0.append(h_end)
        self._s0 = np.array(s0)
        self._x0 = np.array(x0)
        self._h0 = np.array(h0)
        self._kappa = np.array(kappa)
        self.length = float(self._s0[-1])

    @staticmethod
    def _left(h):
        return np.array([-math.sin(h), math.cos(h)])

    def eval_many(self, s):
        """(xy (N,2), heading (N,), curvature (N,)) at clipped arclengths."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = (np.searchsorted(self._s0, s, side="right") - 1).clip(
            0, len(self._kappa) - 1)
        ds = s - self._s0[idx]
        h0 = self._h0[idx]
        k = self._kappa[idx]
        heading = h0 + k * ds
        xy = np.empty((s.size, 2))
        straight = k == 0.0
        xy[straight] = (self._x0[idx[straight]]
                        + ds[straight, None] * np.stack(
                            [np.cos(h0[straight]), np.sin(h0[straight])], axis=1))
        curved = ~straight
        if curved.any():
            kc = k[curved]
            lh0 = np.stack([-np.sin(h0[curved]), np.cos(h0[curved])], axis=1)
            lh1 = np.stack([-np.sin(heading[curved]), np.cos(heading[curved])],
                           axis=1)
            xy[curved] = self._x0[idx[curved]] + (lh0 - lh1) / kc[:, None]
        return xy, heading, k

    def eval(self, s):
        xy, heading, k = self.eval_many(np.array([s]))
        return xy[0], float(heading[0]), float(k[0])


# ---------------------------------------------------------------------------
# world surfaces
# ---------------------------------------------------------------------------

SURFACE_BED = 0
SURFACE_WALL = 1
SURFACE_CEILING = 2
SURFACE_RAIL = 3
SURFACE_PORTAL = 4


class _RectSet:
    """Packed finite rectangles: center, unit in-plane axes, half extents."""

    def __init__(self):
        self.center = []
        self.normal = []
        self.u = []
        self.v = []
        self.hu = []
        self.hv = []
        self.kind = []

    def add(self, center, u_axis, v_axis, hu, hv, kind):
        u_axis = np.asarray(u_axis, dtype=float)
        v_axis = np.asarray(v_axis, dtype=float)
        self.center.append(np.asarray(center, dtype=float))
        self.normal.append(np.cross(u_axis, v_axis))
        self.u.append(u_axis)
        self.v.append(v_axis)
        self.hu.append(float(hu))
        self.hv.append(float(hv))
        self.kind.append(kind)

    def freeze(self):
        self.center = np.array(self.center)
        self.normal = np.array(self.normal)
        self.u = np.array(self.u)
        self.v = np.array(self.v)
        self.hu = np.array(self.hu)
        self.hv = np.array(self.hv)
        self.kind = np.array(self.kind, dtype=np.int64)
        self.radius = np.hypot(self.hu, self.hv)
        return self

    def __len__(self):
        return len(self.hu)


def _box_faces(rects, center, axes, half, kind):
    """All six faces of an oriented box; axes columns are the box frame."""
    c = np.asarray(center, dtype=float)
    ax = [axes[:, i] for i in range(3)]
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        for sign in (1.0, -1.0):
            face_c = c + sign * half[i] * ax[i]
            # outward normal = sign * ax[i]; order u, v to match
            if sign > 0:
                rects.add(face_c, ax[j], ax[k], half[j], half[k], kind)
            else:
                rects.add(face_c, ax[k], ax[j], half[k], half[j], kind)


@dataclass
class WorldParams:
    """Geometry knobs; defaults model a standard-gauge rectangular bore."""

    width: float = 5.4
    height: float = 4.5
    gauge: float = 1.435
    rail_head_width: float = 0.07
    rail_head_top: float = 0.15
    rail_head_bottom: float = 0.10
    portal_spacing: float = 25.0
    portal_depth: float = 0.15  # protrusion into the bore
    portal_thickness: float = 0.3  # along-track extent
    facet_len: float = 10.0
    landmark_density: float = 0.3  # wall texture points per m^2
    station_factor: float = 6.0  # landmark density multiplier in stations
    pipe_heights: Tuple[float, ...] = (3.4, 3.9)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.facet_len <= 0:
            raise InvalidParams("world dimensions must be positive")
        if not 0 < self.rail_head_bottom < self.rail_head_top < self.height:
            raise InvalidParams("rail head band out of range")
        if self.gauge <= self.rail_head_width:
            raise InvalidParams("gauge narrower than the rail head")


class WorldModel:
    """Tunnel geometry, landmark sets, and the ray-castable surface list."""

    def __init__(self, centerline: Centerline, params: WorldParams,
                 stations: Sequence[Tuple[float, float]] = (), seed: int = 0):
        self.centerline = centerline
        self.params = params
        self.stations = [(float(a), float(b)) for a, b in stations]
        self.seed = seed
        self._build_surfaces()
        self._build_landmarks()

    @property
    def length(self) -> float:
        return self.centerline.length

    def frame_at(self, s) -> RigidTransform:
        """Track frame at arclength s: x tangent, y left, origin on the bed."""
        xy, heading, _ = self.centerline.eval(s)
        return RigidTransform(_yaw(heading), np.array([xy[0], xy[1], 0.0]))

    def in_station(self, s) -> bool:
        return any(a <= s <= b for a, b in self.stations)

    # -- construction -------------------------------------------------------

    def _facet_frames(self):
        p = self.params
        n = max(1, int(math.ceil(self.length / p.facet_len)))
        edges = np.linspace(0.0, self.length, n + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            mid = 0.5 * (a + b)
            xy, heading, _ = self.centerline.eval(mid)
            fwd = np.array([math.cos(heading), math.sin(heading), 0.0])
            left = np.array([-math.sin(heading), math.cos(heading), 0.0])
            origin = np.array([xy[0], xy[1], 0.0])
            yield mid, (b - a) / 2.0, origin, fwd, left

    def _build_surfaces(self):
        p = self.params
        up = np.array([0.0, 0.0, 1.0])
        rects = _RectSet()
        for mid, half_len, origin, fwd, left in self._facet_frames():
            half_w = p.width / 2.0
            half_h = p.height / 2.0
            rects.add(origin, fwd, left, half_len, half_w, SURFACE_BED)
            rects.add(origin + p.height * up, fwd, left, half_len, half_w,
                      SURFACE_CEILING)
            for side in (1.0, -1.0):
                rects.add(origin + side * half_w * left + half_h * up,
                          fwd, up, half_len, half_h, SURFACE_WALL)
            head_mid = 0.5 * (p.rail_head_top + p.rail_head_bottom)
            head_hh = 0.5 * (p.rail_head_top - p.rail_head_bottom)
            head_hw = p.rail_head_width / 2.0
            for side in (1.0, -1.0):
                rail_c = origin + side * (p.gauge / 2.0) * left
                rects.add(rail_c + p.rail_head_top * up, fwd, left,
                          half_len, head_hw, SURFACE_RAIL)
                for face in (1.0, -1.0):
                    rects.add(rail_c + face * head_hw * left + head_mid * up,
                              fwd, up, half_len, head_hh, SURFACE_RAIL)
        self._rects = rects
        self._add_portals(rects)
        rects.freeze()
        self.rect_count = len(rects)

    def _add_portals(self, rects):
        p = self.params
        s = p.portal_spacing
        while s < self.length - 1e-9:
            xy, heading, _ = self.centerline.eval(s)
            fwd = np.array([math.cos(heading), math.sin(heading), 0.0])
            left = np.array([-math.sin(heading), math.cos(heading), 0.0])
            up = np.array([0.0, 0.0, 1.0])
            axes = np.stack([fwd, left, up], axis=1)
            origin = np.array([xy[0], xy[1], 0.0])
            half_w = p.width / 2.0
            post_y = half_w - p.portal_depth / 2.0
            post_half = (p.portal_thickness / 2.0, p.portal_depth / 2.0,
                         p.height / 2.0)
            for side in (1.0, -1.0):
                _box_faces(rects, origin + side * post_y * left
                           + (p.height / 2.0) * up, axes, post_half,
                           SURFACE_PORTAL)
            beam_half = (p.portal_thickness / 2.0, half_w,
                         p.portal_depth / 2.0)
            _box_faces(rects, origin + (p.height - p.portal_depth / 2.0) * up,
                       axes, beam_half, SURFACE_PORTAL)
            s += p.portal_spacing

    def _build_landmarks(self):
        p = self.params
        rng = np.random.default_rng(self.seed)
        pts = []
        lines = []
        for mid, half_len, origin, fwd, left in self._facet_frames():
            density = p.landmark_density
            if self.in_station(mid):
                density *= p.station_factor
            area = 2.0 * half_len * p.height
            for side in (1.0, -1.0):
                count = rng.poisson(density * area)
                along = rng.uniform(-half_len, half_len, size=count)
                height = rng.uniform(0.0, p.height, size=count)
                wall = origin + side * (p.width / 2.0) * left
                pts.append(wall + along[:, None] * fwd
                           + height[:, None] * np.array([0.0, 0.0, 1.0]))
            for side, h in zip((1.0, -1.0), p.pipe_heights):
                wall = origin + side * (p.width / 2.0 - 0.05) * left
                base = wall + np.array([0.0, 0.0, h])
                lines.append(np.stack([base - half_len * fwd,
                                       base + half_len * fwd]))
        self.point_landmarks = (np.vstack(pts) if pts
                                else np.zeros((0, 3)))
        self.line_landmarks = lines

    # -- ray casting --------------------------------------------------------

    def rects_near(self, position, reach):
        r = self._rects
        d = np.linalg.norm(r.center - np.asarray(position), axis=1)
        return np.where(d <= reach + r.radius)[0]

    def cast_rays(self, origins, dirs, max_range, rect_ids=None):
        """First-hit distances and rect indices; misses get inf and -1."""
        r = self._rects
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(dirs)
        if len(origins) == 1 and n > 1:
            origins = np.broadcast_to(origins, (n, 3))
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
        ids = rect_ids if rect_ids is not None else range(len(r))
        for idx in ids:
            nrm = r.normal[idx]
            denom = dirs @ nrm
            live = np.abs(denom) > _EPS
            if not live.any():
                continue
            t = np.where(live, ((r.center[idx] - origins) @ nrm)
                         / np.where(live, denom, 1.0), np.inf)
            cand = live & (t > 1e-6) & (t < best_t) & (t <= max_range)
            if not cand.any():
                continue
            rel = origins[cand] + t[cand, None] * dirs[cand] - r.center[idx]
            inb = (np.abs(rel @ r.u[idx]) <= r.hu[idx] + 1e-12) \
                & (np.abs(rel @ r.v[idx]) <= r.hv[idx] + 1e-12)
            hit = np.where(cand)[0][inb]
            best_t[hit] = t[cand][inb]
            best_id[hit] = idx
        return best_t, best_id

    def surface_kind(self, rect_ids):
        out = np.full(len(rect_ids), -1, dtype=np.int64)
        valid = rect_ids >= 0
        out[valid] = self._rects.kind[rect_ids[valid]]
        return out

    def surface_residual(self, points_world, rect_ids):
        """Plane-distance of points to the rects they were cast against."""
        r = self._rects
        rel = points_world - r.center[rect_ids]
        return np.abs(np.einsum("ij,ij->i", rel, r.normal[rect_ids]))

    def surface_normal(self, rect_ids):
        return self._rects.normal[np.asarray(rect_ids)]


def build_world(scenario: str, params: Optional[dict] = None,
                seed: int = 0) -> WorldModel:
    """Scenario templates: straight_tunnel, curved_tunnel, crossover_station."""
    params = dict(params or {})
    scenario_args = {}
    for key in ("length", "radius", "arc_length", "lead", "station_span"):
        if key in params:
            scenario_args[key] = float(params.pop(key))
    try:
        wp = WorldParams(**params)
    except TypeError as e:
        raise InvalidParams(str(e))
    if scenario == "straight_tunnel":
        length = scenario_args.get("length", 750.0)
        if length <= 0:
            raise InvalidParams("tunnel length must be positive")
        segments = [("straight", length)]
        stations = []
    elif scenario == "curved_tunnel":
        radius = scenario_args.get("radius", 800.0)
        arc = scenario_args.get("arc_length", 200.0)
        lead = scenario_args.get("lead", 50.0)
        if arc <= 0:
            raise InvalidParams("arc length must be positive")
        segments = [("straight", lead), ("arc", arc, radius),
                    ("straight", lead)]
        stations = []
    elif scenario == "crossover_station":
        length = scenario_args.get("length", 420.0)
        span = scenario_args.get("station_span", 100.0)
        if span >= length:
            raise InvalidParams("station span exceeds the tunnel")
        segments = [("straight", length)]
        mid = length / 2.0
        stations = [(mid - span / 2.0, mid + span / 2.0)]
    else:
        raise InvalidParams("unknown scenario %r" % scenario)
    return WorldModel(Centerline(segments), wp, stations, seed=seed)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    """Distance to cover and the target speed plateaus along it.

    ``profile`` is a tuple of (plateau length m, speed m/s); a single-entry
    profile is a constant-speed run. Speed changes are realized as constant
    ``ramp_accel`` blends carved out of the start of the next plateau, so
    the realized speed is C0 and the trajectory integrable.
    """

    length: float
    speed: float = 11.11  # 40 km/h, mid paper band
    profile: Optional[Tuple[Tuple[float, float], ...]] = None
    start: float = 0.0
    ramp_accel: float = 1.0

    def __post_init__(self):
        if self.length <= 0:
            raise InvalidParams("trajectory length must be positive")
        total = 0.0
        for piece_len, v in self.plateaus():
            if v <= 0 or piece_len <= 0:
                raise InvalidParams("plateau lengths and speeds must be positive")
            total += piece_len
        if abs(total - self.length) > 1e-6:
            raise InvalidParams("profile covers %.3f m, length says %.3f m"
                                % (total, self.length))
        if self.ramp_accel <= 0:
            raise InvalidParams("ramp acceleration must be positive")

    def plateaus(self):
        if self.profile is not None:
            return tuple((float(l), float(v)) for l, v in self.profile)
        return ((float(self.length), float(self.speed)),)


class _MotionProfile:
    """1-D arclength profile: piecewise constant-acceleration blocks."""

    def __init__(self, plateaus, ramp):
        t0, s0, v0, a = [0.0], [0.0], [], []
        prev_v = None
        for length, v in plateaus:
            if prev_v is not None and v != prev_v:
                acc = ramp if v > prev_v else -ramp
                dt = (v - prev_v) / acc
                ds = 0.5 * (v + prev_v) * dt
                if ds >= length:
                    raise InvalidParams(
                        "plateau of %.1f m too short for a %.1f m ramp"
                        % (length, ds))
                v0.append(prev_v)
                a.append(acc)
                t0.append(t0[-1] + dt)
                s0.append(s0[-1] + ds)
                length -= ds
            v0.append(v)
            a.append(0.0)
            t0.append(t0[-1] + length / v)
            s0.append(s0[-1] + length)
            prev_v = v
        self._t0 = np.array(t0[:-1])
        self._s0 = np.array(s0[:-1])
        self._v0 = np.array(v0)
        self._a = np.array(a)
        self.duration = float(t0[-1])
        self.total = float(s0[-1])

    def query_many(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.duration)
        idx = (np.searchsorted(self._t0, t, side="right") - 1).clip(
            0, len(self._a) - 1)
        dt = t - self._t0[idx]
        v0 = self._v0[idx]
        a = self._a[idx]
        s = self._s0[idx] + v0 * dt + 0.5 * a * dt * dt
        return s, v0 + a * dt, a


class Trajectory:
    """Continuous-time ground truth along the centerline at mount height."""

    def __init__(self, world: WorldModel, spec: TrajectorySpec,
                 mount_height: float = 1.0):
        if spec.length > world.length + 1e-9:
            raise InvalidParams(
                "trajectory of %.1f m exceeds the %.1f m world"
                % (spec.length, world.length))
        self.world = world
        self.spec = spec
        self.mount_height = float(mount_height)
        self._profile = _MotionProfile(spec.plateaus(), spec.ramp_accel)
        self.t0 = float(spec.start)
        self.t1 = self.t0 + self._profile.duration

    @property
    def duration(self) -> float:
        return self._profile.duration

    def _eval(self, ts):
        s, v, a = self._profile.query_many(np.asarray(ts, dtype=float) - self.t0)
        xy, heading, kappa = self.world.centerline.eval_many(s)
        return s, v, a, xy, heading, kappa

    def pose_many(self, ts):
        """(quats (N,4) wxyz, translations (N,3)) of the body."""
        _, _, _, xy, heading, _ = self._eval(ts)
        half = heading / 2.0
        quats = np.stack([np.cos(half), np.zeros_like(half),
                          np.zeros_like(half), np.sin(half)], axis=1)
        trans = np.column_stack([xy, np.full(len(heading), self.mount_height)])
        return quats, trans

    def kinematics_many(self, ts):
        """(velocity, acceleration, body rates), each (N,3), world frame
        for the first two."""
        _, v, a, _, heading, kappa = self._eval(ts)
        cos_h, sin_h = np.cos(heading), np.sin(heading)
        tangent = np.stack([cos_h, sin_h, np.zeros_like(heading)], axis=1)
        left = np.stack([-sin_h, cos_h, np.zeros_like(heading)], axis=1)
        vel = v[:, None] * tangent
        acc = a[:, None] * tangent + (kappa * v * v)[:, None] * left
        rates = np.zeros_like(vel)
        rates[:, 2] = kappa * v
        return vel, acc, rates

    def pose(self, t) -> RigidTransform:
        q, p = self.pose_many([t])
        return RigidTransform(Rotation(q[0]), p[0])

    def velocity(self, t):
        return self.kinematics_many([t])[0][0]

    def acceleration(self, t):
        return self.kinematics_many([t])[1][0]

    def angular_velocity(self, t):
        """World-frame; equals body rates here since the track is flat."""
        return self.kinematics_many([t])[2][0]

    def state_at(self, t) -> NavState:
        q, p = self.pose_many([t])
        vel, _, _ = self.kinematics_many([t])
        return NavState(float(t), p[0], vel[0], Rotation(q[0]))

    def sample_states(self, rate: float) -> List[NavState]:
        n = int(math.floor((self.t1 - self.t0) * rate + 1e-9))
        return [self.state_at(self.t0 + k / rate) for k in range(n + 1)]


def generate_trajectory(world: WorldModel, spec: TrajectorySpec,
                        mount_height: float = 1.0) -> Trajectory:
    return Trajectory(world, spec, mount_height)


# ---------------------------------------------------------------------------
# IMU synthesis
# ---------------------------------------------------------------------------


def synthesize_imu(traj: Trajectory, rig: SensorRig, seed: int = 0,
                   init_bias: Optional[ImuBias] = None,
                   gravity=GRAVITY):
    """(samples, bias trace): specific force and body rates with additive
    noise and random-walk biases per the rig's noise config."""
    rate = rig.imu_rate
    n = int(math.floor((traj.t1 - traj.t0) * rate + 1e-9)) + 1
    ts = traj.t0 + np.arange(n) / rate
    quats, _ = traj.pose_many(ts)
    _, acc_w, rates = traj.kinematics_many(ts)
    g = np.asarray(gravity, dtype=float)
    # body = yaw only, so the inverse rotation is a yaw by -heading
    cos_h = quats[:, 0] ** 2 - quats[:, 3] ** 2
    sin_h = 2.0 * quats[:, 0] * quats[:, 3]
    up = acc_w + g
    f_body = np.stack([cos_h * up[:, 0] + sin_h * up[:, 1],
                       -sin_h * up[:, 0] + cos_h * up[:, 1],
                       up[:, 2]], axis=1)
    noise = rig.imu_noise
    rng = np.random.default_rng(seed)
    sq = math.sqrt(rate)
    dt = 1.0 / rate
    accel_noise = rng.normal(size=(n, 3)) * noise.accel_noise * sq
    gyro_noise = rng.normal(size=(n, 3)) * noise.gyro_noise * sq
    walk_a = np.cumsum(rng.normal(size=(n, 3)), axis=0) \
        * noise.accel_walk * math.sqrt(dt)
    walk_g = np.cumsum(rng.normal(size=(n, 3)), axis=0) \
        * noise.gyro_walk * math.sqrt(dt)
    b0 = init_bias if init_bias is not None else ImuBias()
    ba = b0.accel + walk_a - walk_a[0]
    bg = b0.gyro + walk_g - walk_g[0]
    samples = []
    trace = []
    for k in range(n):
        samples.append(ImuSample(float(ts[k]),
                                 f_body[k] + ba[k] + accel_noise[k],
                                 rates[k] + bg[k] + gyro_noise[k]))
        trace.append(ImuBias(ba[k].copy(), bg[k].copy()))
    return samples, trace


# ---------------------------------------------------------------------------
# LiDAR synthesis
# ---------------------------------------------------------------------------


def synthesize_lidar(traj: Trajectory, world: WorldModel, rig: SensorRig,
                     seed: int = 0) -> Iterator[LidarScan]:
    """Scans at the LiDAR rate; each covers the preceding 1/rate seconds
    with true per-point times, seeded per frame. Lazily generated because
    a long run does not fit in memory."""
    period = 1.0 / rig.lidar_rate
    fov_h = math.radians(rig.lidar_fov_deg[0])
    fov_v = math.radians(rig.lidar_fov_deg[1])
    r_sl = rig.t_body_lidar.rotation.matrix()
    t_sl = rig.t_body_lidar.translation
    frame = 0
    while True:
        end = traj.t0 + (frame + 1) * period
        if end > traj.t1 + 1e-9:
            return
        start = end - period
        rng = np.random.default_rng((seed, frame))
        n = rig.lidar_points
        az = (rng.random(n) - 0.5) * fov_h
        el = (rng.random(n) - 0.5) * fov_v
        offs = np.sort(rng.random(n)) * period
        dirs_l = np.stack([np.cos(el) * np.cos(az),
                           np.cos(el) * np.sin(az),
                           np.sin(el)], axis=1)
        quats, trans = traj.pose_many(start + offs)
        dirs_b = dirs_l @ r_sl.T
        w, z = quats[:, 0], quats[:, 3]
        cos_h = w * w - z * z
        sin_h = 2.0 * w * z
        def yaw_apply(v):
            return np.stack([cos_h * v[:, 0] - sin_h * v[:, 1],
                             sin_h * v[:, 0] + cos_h * v[:, 1],
                             v[:, 2]], axis=1)
        dirs_w = yaw_apply(dirs_b)
        origins = yaw_apply(np.broadcast_to(t_sl, (n, 3))) + trans
        top_speed = max(v for _, v in traj.spec.plateaus())
        near = world.rects_near(trans[0], rig.lidar_max_range
                                + top_speed * period + 2.0)
        t_hit, rect_id = world.cast_rays(origins, dirs_w,
                                         rig.lidar_max_range, near)
        keep = np.isfinite(t_hit)
        ranges = t_hit[keep] + rng.normal(size=int(keep.sum())) \
            * rig.lidar_range_sigma
        points = dirs_l[keep] * ranges[:, None]
        # labels are rect indices; world.surface_kind classifies them
        yield LidarScan(start, end, points, offs[keep],
                        labels=rect_id[keep])
        frame += 1


# ---------------------------------------------------------------------------
# camera track synthesis
# ---------------------------------------------------------------------------

_LINE_ID_BASE = 10_000_000
_GENERATION_STRIDE = 100_000_000


def _image_line(a, b):
    """Normalized 2D line through two normalized image points."""
    la = np.array([a[0], a[1], 1.0])
    lb = np.array([b[0], b[1], 1.0])
    line = np.cross(la, lb)
    norm = math.hypot(line[0], line[1])
    if norm < 1e-12:
        return None
    return line / norm


class _TrackBook:
    """Active-track bookkeeping with the 2-frame grace period."""

    def __init__(self, max_misses=2):
        self.active = {}
        self.done = []
        self.generation = {}
        self.max_misses = max_misses

    def observe(self, key, base_id, kind, stamp, meas):
        entry = self.active.get(key)
        if entry is None:
            gen = self.generation.get(key, 0)
            self.generation[key] = gen + 1
            entry = [FeatureTrack(base_id + gen * _GENERATION_STRIDE, kind), 0]
            self.active[key] = entry
        entry[0].observations.append((stamp, meas))
        entry[1] = 0

    def miss(self, key):
        entry = self.active.get(key)
        if entry is None:
            return
        entry[1] += 1
        if entry[1] >= self.max_misses:
            self.done.append(entry[0])
            del self.active[key]

    def finish(self):
        out = self.done + [e[0] for e in self.active.values()]
        out.sort(key=lambda tr: (tr.first_stamp(), tr.feature_id))
        return out


def synthesize_camera_tracks(traj: Trajectory, world: WorldModel,
                             rig: SensorRig, seed: int = 0,
                             dropout: float = 0.0,
                             vis_range: float = 80.0) -> List[FeatureTrack]:
    """Feature tracks of the world's landmarks as a camera would see them:
    in-bounds, in front, within vis_range, not occluded by tunnel surfaces;
    pixel noise in normalized units; a track dies after 2 consecutive
    invisible frames."""
    rng = np.random.default_rng((seed, 1 << 31))  # disjoint from scan seeds
    intr = rig.intrinsics
    sigma_n = rig.pixel_sigma / intr.fx
    period = 1.0 / rig.camera_rate
    n_frames = int(math.floor((traj.t1 - traj.t0) / period + 1e-9)) + 1
    book = _TrackBook()
    pts = world.point_landmarks
    lines = world.line_landmarks
    for k in range(n_frames):
        stamp = traj.t0 + k * period
        cam = traj.pose(stamp).compose(rig.t_body_camera)
        r_wc = cam.rotation.matrix()
        c = cam.translation
        near = world.rects_near(c, vis_range + 1.0)
        ok, norm = _visible_points(world, pts, r_wc, c, intr, vis_range, near)
        for i in np.where(ok)[0]:
            i = int(i)
            if dropout > 0.0 and rng.random() < dropout:
                book.miss(("p", i))
                continue
            meas = norm[i] + rng.normal(size=2) * sigma_n
            book.observe(("p", i), i, "point", stamp, meas)
        for i in np.where(~ok)[0]:
            book.miss(("p", int(i)))
        for j, seg in enumerate(lines):
            line = None
            ends_cam = (seg - c) @ r_wc
            dist = np.linalg.norm(seg - c, axis=1)
            if ends_cam[:, 2].min() > 0.2 and dist.max() <= vis_range:
                a = ends_cam[0, :2] / ends_cam[0, 2]
                b = ends_cam[1, :2] / ends_cam[1, 2]
                px = intr.pixel_from_normalized(np.stack([a, b]))
                if intr.contains(px).all() and not _occluded(world, seg, c,
                                                             near):
                    line = _image_line(a + rng.normal(size=2) * sigma_n,
                                       b + rng.normal(size=2) * sigma_n)
            if line is None:
                book.miss(("l", j))
            else:
                book.observe(("l", j), _LINE_ID_BASE + j, "line", stamp, line)
    return book.finish()


def _visible_points(world, pts, r_wc, c, intr, vis_range, near):
    if len(pts) == 0:
        return np.zeros(0, dtype=bool), np.zeros((0, 2))
    p_cam = (pts - c) @ r_wc
    norm = np.zeros((len(pts), 2))
    ok = p_cam[:, 2] > 0.2
    norm[ok] = p_cam[ok, :2] / p_cam[ok, 2:3]
    px = intr.pixel_from_normalized(norm)
    ok &= intr.contains(px)
    ok &= np.linalg.norm(pts - c, axis=1) <= vis_range
    idx = np.where(ok)[0]
    if idx.size:
        rel = pts[idx] - c
        dist = np.linalg.norm(rel, axis=1)
        dirs = rel / dist[:, None]
        t_hit, _ = world.cast_rays(np.broadcast_to(c, dirs.shape), dirs,
                                   np.inf, near)
        ok[idx] &= t_hit > dist - 1e-4
    return ok, norm


def _occluded(world, seg, c, near):
    rel = seg - c
    dist = np.linalg.norm(rel, axis=1)
    dirs = rel / dist[:, None]
    t_hit, _ = world.cast_rays(np.broadcast_to(c, (2, 3)), dirs, np.inf, near)
    # the pipes float 5 cm off the wall, so a clear sightline beats the
    # wall hit behind the endpoint by a visible margin
    return bool((t_hit < dist - 0.02).any())


# ---------------------------------------------------------------------------
# dataset export
# ---------------------------------------------------------------------------


def export_dataset(out_dir: str, rig: SensorRig, imu_samples,
                   scans, tracks, groundtruth=None,
                   gravity: float = 9.81) -> DatasetManifest:
    """Writes the dataset_io directory layout; scans may be a generator."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    if imu_samples:
        write_imu_csv(imu_samples, os.path.join(out_dir, "imu.csv"))
        files["imu"] = {"path": "imu.csv", "count": len(imu_samples),
                        "stamp_range": [imu_samples[0].timestamp,
                                        imu_samples[-1].timestamp]}
    if scans is not None:
        scan_dir = os.path.join(out_dir, "scans")
        os.makedirs(scan_dir, exist_ok=True)
        count = 0
        lo = hi = None
        for scan in scans:
            write_scan_bin(scan, os.path.join(scan_dir, "%06d.bin" % count))
            lo = scan.frame_start if lo is None else lo
            hi = scan.frame_end
            count += 1
        if count:
            files["scans"] = {"path": "scans", "count": count,
                              "stamp_range": [lo, hi]}
    if tracks:
        rows = write_tracks_csv(tracks, os.path.join(out_dir, "tracks.csv"))
        stamps = [s for tr in tracks for s, _ in tr.observations]
        files["tracks"] = {"path": "tracks.csv", "count": rows,
                           "stamp_range": [min(stamps), max(stamps)]}
    if groundtruth:
        save_trajectory(groundtruth, os.path.join(out_dir, "groundtruth.csv"))
        first = groundtruth[0]
        last = groundtruth[-1]
        t0 = first.timestamp if hasattr(first, "timestamp") else first[0]
        t1 = last.timestamp if hasattr(last, "timestamp") else last[0]
        files["groundtruth"] = {"path": "groundtruth.csv",
                                "count": len(groundtruth),
                                "stamp_range": [t0, t1]}
    manifest = DatasetManifest(rig=rig, gravity=gravity, files=files)
    save_manifest(manifest, out_dir)
    return manifest


def simulate_dataset(out_dir: str, scenario: str = "straight_tunnel",
                     world_params: Optional[dict] = None,
                     spec: Optional[TrajectorySpec] = None,
                     rig: Optional[SensorRig] = None,
                     seed: int = 0, gravity: float = 9.81,
                     dropout: float = 0.0,
                     groundtruth_rate: Optional[float] = None):
    """One-call synthesis: world, trajectory, all streams, export.

    Returns (world, trajectory, manifest).
    """
    rig = rig if rig is not None else SensorRig()
    world = build_world(scenario, world_params, seed=seed)
    if spec is None:
        spec = TrajectorySpec(length=world.length)
    traj = generate_trajectory(world, spec)
    imu_samples, _ = synthesize_imu(traj, rig, seed=seed)
    scans = synthesize_lidar(traj, world, rig, seed=seed)
    tracks = synthesize_camera_tracks(traj, world, rig, seed=seed,
                                      dropout=dropout)
    gt_rate = groundtruth_rate if groundtruth_rate is not None else rig.imu_rate
    gt = traj.sample_states(gt_rate)
    manifest = export_dataset(out_dir, rig, imu_samples, scans, tracks,
                              groundtruth=gt, gravity=gravity)
    return world, traj, manifest
