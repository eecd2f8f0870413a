"""Dataset directory format shared by the simulator, pipeline, and evaluator.

Layout::

    manifest.json      format version, sensor rig, gravity, file inventory
    imu.csv            stamp, ax, ay, az, gx, gy, gz
    tracks.csv         stamp, feature_id, kind, m1, m2, m3, depth
    scans/NNNNNN.bin   f64 stamp_start, f64 stamp_end, u32 count, then
                       count * (f32 x, y, z, t_offset), all little-endian
    groundtruth.csv    stamp, px, py, pz, qw, qx, qy, qz

Every stamp is float64 seconds on one shared clock. Floats in CSV and JSON
are written with 17 significant digits so round trips are exact.
"""

from __future__ import annotations

import heapq
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    CorruptRecord,
    CoverageGap,
    MissingFile,
    VersionMismatch,
)
from .features import LidarScan
from .geometry import RigidTransform, Rotation
from .imu import ImuNoiseConfig, ImuSample, NavState
from .vio import CameraIntrinsics, FeatureTrack

FORMAT_VERSION = 1

_SCAN_HEADER = struct.Struct("<ddI")


def _fmt(x):
    return "%.17g" % float(x)


class TimedPose(NamedTuple):
    stamp: float
    pose: RigidTransform


# ---------------------------------------------------------------------------
# sensor rig
# ---------------------------------------------------------------------------


def _default_camera_mount():
    # camera: z forward, x right, y down; body: x forward, y left, z up
    r = Rotation.from_matrix(np.array([[0.0, 0.0, 1.0],
                                       [-1.0, 0.0, 0.0],
                                       [0.0, -1.0, 0.0]]))
    return RigidTransform(r, np.zeros(3))


def _default_intrinsics():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@dataclass(frozen=True)
class SensorRig:
    """Rates, noise figures, and mounting of the simulated sensor head."""

    imu_rate: float = 200.0
    imu_noise: ImuNoiseConfig = field(default_factory=ImuNoiseConfig)
    lidar_rate: float = 10.0
    lidar_fov_deg: Tuple[float, float] = (65.0, 40.0)
    lidar_max_range: float = 100.0
    lidar_range_sigma: float = 0.02
    lidar_points: int = 50_000
    camera_rate: float = 10.0
    intrinsics: CameraIntrinsics = field(default_factory=_default_intrinsics)
    pixel_sigma: float = 0.5
    t_body_lidar: RigidTransform = field(default_factory=RigidTransform.identity)
    t_body_camera: RigidTransform = field(default_factory=_default_camera_mount)

    def __post_init__(self):
        for name in ("imu_rate", "lidar_rate", "camera_rate"):
            if getattr(self, name) <= 0.0:
                raise ValueError("%s must be positive" % name)

    def to_dict(self):
        n = self.imu_noise
        return {
            "imu_rate": self.imu_rate,
            "imu_noise": {"accel_noise": n.accel_noise,
                          "gyro_noise": n.gyro_noise,
                          "accel_walk": n.accel_walk,
                          "gyro_walk": n.gyro_walk,
                          "rate": n.rate},
            "lidar_rate": self.lidar_rate,
            "lidar_fov_deg": list(self.lidar_fov_deg),
            "lidar_max_range": self.lidar_max_range,
            "lidar_range_sigma": self.lidar_range_sigma,
            "lidar_points": self.lidar_points,
            "camera_rate": self.camera_rate,
            "intrinsics": {"fx": self.intrinsics.fx, "fy": self.intrinsics.fy,
                           "cx": self.intrinsics.cx, "cy": self.intrinsics.cy,
                           "width": self.intrinsics.width,
                           "height": self.intrinsics.height},
            "pixel_sigma": self.pixel_sigma,
            "t_body_lidar": _transform_to_dict(self.t_body_lidar),
            "t_body_camera": _transform_to_dict(self.t_body_camera),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            imu_rate=float(d["imu_rate"]),
            imu_noise=ImuNoiseConfig(**d["imu_noise"]),
            lidar_rate=float(d["lidar_rate"]),
            lidar_fov_deg=tuple(d["lidar_fov_deg"]),
            lidar_max_range=float(d["lidar_max_range"]),
            lidar_range_sigma=float(d["lidar_range_sigma"]),
            lidar_points=int(d["lidar_points"]),
            camera_rate=float(d["camera_rate"]),
            intrinsics=CameraIntrinsics(**d["intrinsics"]),
            pixel_sigma=float(d["pixel_sigma"]),
            t_body_lidar=_transform_from_dict(d["t_body_lidar"]),
            t_body_camera=_transform_from_dict(d["t_body_camera"]),
        )


def _transform_to_dict(t: RigidTransform):
    return {"quat_wxyz": list(t.rotation.quat),
            "translation": list(t.translation)}


def _transform_from_dict(d):
    return RigidTransform(Rotation(np.array(d["quat_wxyz"], dtype=float)),
                          np.array(d["translation"], dtype=float))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Inventory of one dataset directory plus its rig and gravity."""

    rig: SensorRig
    gravity: float = 9.81
    version: int = FORMAT_VERSION
    files: dict = field(default_factory=dict)

    def to_dict(self):
        return {"version": self.version, "gravity": self.gravity,
                "rig": self.rig.to_dict(), "files": self.files}

    @classmethod
    def from_dict(cls, d):
        return cls(rig=SensorRig.from_dict(d["rig"]),
                   gravity=float(d["gravity"]),
                   version=int(d["version"]),
                   files=dict(d["files"]))


def _json_bytes(obj):
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("ascii")


def save_manifest(manifest: DatasetManifest, root: str) -> str:
    path = os.path.join(root, "manifest.json")
    with open(path, "wb") as fh:
        fh.write(_json_bytes(manifest.to_dict()))
    return path


# ---------------------------------------------------------------------------
# IMU stream
# ---------------------------------------------------------------------------


def write_imu_csv(samples: Sequence[ImuSample], path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("stamp,ax,ay,az,gx,gy,gz\n")
        for s in samples:
            row = [s.timestamp, *s.accel, *s.gyro]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_imu_csv(path: str) -> List[ImuSample]:
    out = []
    for index, parts in _csv_rows(path, expect=7):
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise CorruptRecord("unparseable IMU row", path=path, index=index)
        out.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return out


def _csv_rows(path, expect):
    """Yields (record_index, fields) and rejects rows of the wrong width."""
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "r") as fh:
        header = fh.readline()
        if not header:
            return
        for index, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != expect:
                raise CorruptRecord(
                    "expected %d fields, got %d" % (expect, len(parts)),
                    path=path, index=index)
            yield index, parts


# ---------------------------------------------------------------------------
# feature tracks
# ---------------------------------------------------------------------------


def write_tracks_csv(tracks: Sequence[FeatureTrack], path: str) -> int:
    """One row per observation, stamp-major; returns the row count."""
    rows = []
    for tr in tracks:
        for k, (stamp, m) in enumerate(tr.observations):
            m = np.asarray(m, dtype=float)
            m3 = m[2] if len(m) > 2 else 0.0
            depth = ""
            if k == 0 and tr.depth is not None:
                depth = _fmt(tr.depth)
            rows.append((stamp, tr.feature_id,
                         ",".join([_fmt(stamp), str(tr.feature_id), tr.kind,
                                   _fmt(m[0]), _fmt(m[1]), _fmt(m3), depth])))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="\n") as fh:
        fh.write("stamp,feature_id,kind,m1,m2,m3,depth\n")
        for _, _, line in rows:
            fh.write(line + "\n")
    return len(rows)


def read_tracks_csv(path: str) -> List[FeatureTrack]:
    """Regroups observation rows into tracks ordered by first appearance."""
    tracks = {}
    for index, parts in _csv_rows(path, expect=7):
        stamp_s, fid_s, kind, m1, m2, m3, depth_s = parts
        try:
            stamp = float(stamp_s)
            fid = int(fid_s)
            meas = np.array([float(m1), float(m2), float(m3)])
            depth = float(depth_s) if depth_s else None
        except ValueError:
            raise CorruptRecord("unparseable track row", path=path, index=index)
        if kind not in ("point", "line"):
            raise CorruptRecord("unknown track kind %r" % kind,
                                path=path, index=index)
        if kind == "point":
            meas = meas[:2]
        tr = tracks.get(fid)
        if tr is None:
            tr = FeatureTrack(fid, kind)
            tracks[fid] = tr
        tr.observations.append((stamp, meas))
        if depth is not None and tr.depth is None:
            tr.depth = depth
    for tr in tracks.values():
        tr.observations.sort(key=lambda o: o[0])
    return list(tracks.values())


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------


def write_scan_bin(scan: LidarScan, path: str) -> None:
    pts = np.asarray(scan.points, dtype="<f4")
    offs = np.asarray(scan.t_offset, dtype="<f4").reshape(-1, 1)
    body = np.hstack([pts, offs]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_SCAN_HEADER.pack(scan.frame_start, scan.frame_end,
                                   len(pts)))
        fh.write(body.tobytes(order="C"))


def read_scan_bin(path: str) -> LidarScan:
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as fh:
        head = fh.read(_SCAN_HEADER.size)
        if len(head) != _SCAN_HEADER.size:
            raise CorruptRecord("scan header truncated", path=path, index=0)
        start, end, count = _SCAN_HEADER.unpack(head)
        body = np.frombuffer(fh.read(), dtype="<f4")
    if body.size != count * 4:
        raise CorruptRecord(
            "scan body has %d floats, header promised %d" % (body.size, count * 4),
            path=path, index=0)
    body = body.reshape(count, 4)
    return LidarScan(start, end, body[:, 0:3].astype(float),
                     body[:, 3].astype(float))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def _as_timed_pose(entry) -> TimedPose:
    if isinstance(entry, NavState):
        return TimedPose(entry.timestamp, entry.pose())
    if isinstance(entry, TimedPose):
        return entry
    stamp, pose = entry
    return TimedPose(float(stamp), pose)


def save_trajectory(states, path: str) -> None:
    """CSV of stamped body-to-world poses; accepts NavStates or
    (stamp, RigidTransform) pairs."""
    with open(path, "w", newline="\n") as fh:
        fh.write("stamp,px,py,pz,qw,qx,qy,qz\n")
        for entry in states:
            tp = _as_timed_pose(entry)
            row = [tp.stamp, *tp.pose.translation, *tp.pose.rotation.quat]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_trajectory(path: str) -> List[TimedPose]:
    out = []
    for index, parts in _csv_rows(path, expect=8):
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise CorruptRecord("unparseable pose row", path=path, index=index)
        q = np.array(vals[4:8])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise CorruptRecord("quaternion norm %.3f" % norm,
                                path=path, index=index)
        out.append(TimedPose(vals[0], RigidTransform(Rotation(q / norm),
                                                     np.array(vals[1:4]))))
    return out


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------


class Dataset:
    """Lazily-readable view of one dataset directory."""

    def __init__(self, root: str, manifest: DatasetManifest):
        self.root = root
        self.manifest = manifest

    def _entry(self, name):
        return self.manifest.files.get(name)

    def has(self, name) -> bool:
        return self._entry(name) is not None

    def imu(self) -> List[ImuSample]:
        entry = self._entry("imu")
        return read_imu_csv(os.path.join(self.root, entry["path"])) if entry else []

    def tracks(self) -> List[FeatureTrack]:
        entry = self._entry("tracks")
        if not entry:
            return []
        return read_tracks_csv(os.path.join(self.root, entry["path"]))

    def scan_paths(self) -> List[str]:
        entry = self._entry("scans")
        if not entry:
            return []
        scan_dir = os.path.join(self.root, entry["path"])
        names = sorted(n for n in os.listdir(scan_dir) if n.endswith(".bin"))
        return [os.path.join(scan_dir, n) for n in names]

    def scans(self) -> Iterator[LidarScan]:
        for path in self.scan_paths():
            yield read_scan_bin(path)

    def groundtruth(self) -> Optional[List[TimedPose]]:
        entry = self._entry("groundtruth")
        if not entry:
            return None
        return load_trajectory(os.path.join(self.root, entry["path"]))

    def merged(self):
        """(stamp, kind, payload) across streams, stamp-major; ties break
        imu before scan before camera. Scans order on their end stamp."""
        feeds = []
        if self.has("imu"):
            feeds.append(((s.timestamp, 0, "imu", s) for s in self.imu()))
        if self.has("scans"):
            feeds.append(((sc.frame_end, 1, "scan", sc) for sc in self.scans()))
        if self.has("tracks"):
            frames = {}
            for tr in self.tracks():
                for stamp, meas in tr.observations:
                    frames.setdefault(stamp, []).append((tr, meas))
            feeds.append(((stamp, 2, "camera", frames[stamp])
                          for stamp in sorted(frames)))
        for stamp, _, kind, payload in heapq.merge(*feeds):
            yield stamp, kind, payload


def load_dataset(root: str) -> Dataset:
    man_path = os.path.join(root, "manifest.json")
    if not os.path.exists(man_path):
        raise MissingFile(man_path)
    with open(man_path, "r") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise CorruptRecord("manifest is not valid JSON: %s" % e,
                                path=man_path, index=0)
    version = int(raw.get("version", -1))
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            "dataset version %d, reader supports %d" % (version, FORMAT_VERSION))
    manifest = DatasetManifest.from_dict(raw)
    for name, entry in manifest.files.items():
        path = os.path.join(root, entry["path"])
        if not os.path.exists(path):
            raise MissingFile("%s (listed as %r)" % (path, name))
        if name == "scans":
            have = len([n for n in os.listdir(path) if n.endswith(".bin")])
            if have != entry["count"]:
                raise MissingFile(
                    "scan dir %s holds %d files, manifest lists %d"
                    % (path, have, entry["count"]))
    return Dataset(root, manifest)


# ---------------------------------------------------------------------------
# map accumulation
# ---------------------------------------------------------------------------


def _slerp_many(q0, q1, alpha):
    """Row-wise unit quaternion slerp with the usual lerp fallback."""
    dot = np.sum(q0 * q1, axis=1)
    q1 = np.where(dot[:, None] < 0.0, -q1, q1)
    dot = np.abs(dot).clip(-1.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    small = sin_theta < 1e-9
    w0 = np.where(small, 1.0 - alpha, np.sin((1.0 - alpha) * theta)
                  / np.where(small, 1.0, sin_theta))
    w1 = np.where(small, alpha, np.sin(alpha * theta)
                  / np.where(small, 1.0, sin_theta))
    out = w0[:, None] * q0 + w1[:, None] * q1
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _rotate_many(q, v):
    """Applies row-wise quaternions (w, x, y, z) to row-wise vectors."""
    w = q[:, 0:1]
    u = q[:, 1:4]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def interpolate_poses(trajectory: Sequence[TimedPose], stamps) -> tuple:
    """(quats (N,4), translations (N,3)) of the trajectory at the stamps.

    Raises CoverageGap when a stamp falls outside the trajectory span.
    """
    stamps = np.asarray(stamps, dtype=float)
    ts = np.array([tp.stamp for tp in trajectory])
    if len(ts) == 0 or stamps.size == 0:
        raise CoverageGap("empty trajectory or stamp set")
    eps = 1e-9
    if stamps.min() < ts[0] - eps or stamps.max() > ts[-1] + eps:
        raise CoverageGap(
            "stamps [%f, %f] exceed trajectory span [%f, %f]"
            % (stamps.min(), stamps.max(), ts[0], ts[-1]))
    quats = np.array([tp.pose.rotation.quat for tp in trajectory])
    trans = np.array([tp.pose.translation for tp in trajectory])
    if len(ts) == 1:
        n = stamps.size
        return np.tile(quats[0], (n, 1)), np.tile(trans[0], (n, 1))
    hi = np.searchsorted(ts, stamps, side="right").clip(1, len(ts) - 1)
    lo = hi - 1
    span = (ts[hi] - ts[lo])
    alpha = np.where(span > 0.0, (stamps - ts[lo]) / np.where(span > 0, span, 1.0),
                     0.0).clip(0.0, 1.0)
    q = _slerp_many(quats[lo], quats[hi], alpha)
    t = trans[lo] + alpha[:, None] * (trans[hi] - trans[lo])
    return q, t


def accumulate_map(scans, trajectory: Sequence[TimedPose], voxel: float,
                   t_body_lidar: Optional[RigidTransform] = None) -> np.ndarray:
    """World-frame voxel map from scans deskewed against a pose trajectory.

    Each point is moved with the interpolated body pose at its own stamp,
    then voxels of the given edge collapse to their centroid.
    """
    if voxel <= 0.0:
        raise ValueError("voxel edge must be positive")
    tl = t_body_lidar if t_body_lidar is not None else RigidTransform.identity()
    rl = tl.rotation.matrix()
    clouds = []
    for scan in scans:
        stamps = scan.frame_start + np.asarray(scan.t_offset, dtype=float)
        q, t = interpolate_poses(trajectory, stamps)
        local = scan.points @ rl.T + tl.translation
        clouds.append(_rotate_many(q, local) + t)
    if not clouds:
        return np.zeros((0, 3))
    cloud = np.vstack(clouds)
    keys = np.floor(cloud / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, cloud)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return sums / counts[:, None]


# ---------------------------------------------------------------------------
# PLY export
# ---------------------------------------------------------------------------

_PLY_HEADER = (b"ply\n"
               b"format binary_little_endian 1.0\n"
               b"element vertex %d\n"
               b"property float x\n"
               b"property float y\n"
               b"property float z\n"
               b"end_header\n")


def write_ply(points: np.ndarray, path: str) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER % len(pts))
        fh.write(pts.tobytes(order="C"))


def read_ply(path: str) -> np.ndarray:
    """Strict reader for the exact header layout written above."""
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as fh:
        data = fh.read()
    head, sep, body = data.partition(b"end_header\n")
    if not sep:
        raise CorruptRecord("missing PLY end_header", path=path, index=0)
    lines = head.decode("ascii").splitlines()
    want = ["ply", "format binary_little_endian 1.0", None,
            "property float x", "property float y", "property float z"]
    if len(lines) != 6 or any(w is not None and lines[i] != w
                              for i, w in enumerate(want)):
        raise CorruptRecord("unexpected PLY header", path=path, index=0)
    if not lines[2].startswith("element vertex "):
        raise CorruptRecord("missing vertex element", path=path, index=0)
    count = int(lines[2].rsplit(" ", 1)[1])
    pts = np.frombuffer(body, dtype="<f4")
    if pts.size != count * 3:
        raise CorruptRecord("PLY body length mismatch", path=path, index=0)
    return pts.reshape(count, 3).astype(float)
