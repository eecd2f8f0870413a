"""LiDAR scan features: motion deskew, rail-pair extraction, voxel-plane
segmentation, depth-continuous edge lines, and frame-to-frame association.

Scans are handled in the sensor frame: x forward, y left, z up, origin at
the unit. Rail extraction assumes the sensor rides centered between the
two rails at ``RailConfig.mount_height`` above the track bed, which is how
the simulator and the reference vehicle are rigged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    AsymmetricRails,
    DegenerateSpread,
    EmptyStream,
    InsufficientImuCoverage,
    NoBedPoints,
    NoRailsFound,
)
from .geometry import (
    InfiniteLine,
    Plane,
    canonicalize_line,
    quat_rotate,
    quat_slerp,
)
from .imu import _pack, propagate_states


@dataclass
class LidarScan:
    """One sweep. ``points`` are sensor-frame, ``t_offset`` is seconds from
    ``frame_start``. ``labels`` (surface ids) exist only for simulated data
    and are never serialized."""

    frame_start: float
    frame_end: float
    points: np.ndarray
    t_offset: np.ndarray
    intensity: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.points) == 0:
            raise EmptyStream("scan has no points")
        if self.frame_end < self.frame_start:
            raise ValueError("scan ends before it starts")

    @property
    def count(self):
        return len(self.points)


@dataclass(frozen=True)
class LineFeature:
    """A fitted infinite line plus the finite support that produced it."""

    line: InfiniteLine
    centroid: np.ndarray
    half_length: float
    kind: str  # "rail" | "edge"
    rms: float
    support_count: int
    points: np.ndarray  # support (possibly subsampled)
    indices: Optional[np.ndarray] = None  # into the source scan


@dataclass(frozen=True)
class PlaneFeature:
    plane: Plane
    centroid: np.ndarray
    planarity: float  # lambda_min / lambda_mid of the support
    rms: float
    support_count: int
    points: np.ndarray
    indices: Optional[np.ndarray] = None


@dataclass(frozen=True)
class RailConfig:
    mount_height: float = 1.0  # sensor height above the track bed, m
    bed_band: float = 0.1  # half-width of the bed height gate, m
    min_bed_points: int = 50
    rail_height_min: float = 0.1  # rail band above the bed plane, m
    rail_height_max: float = 0.25
    gauge: float = 1.435
    lateral_window: float = 0.3  # half-width around +-gauge/2, m
    rail_head_tol: float = 0.07  # track-head width, the inlier gate, m
    ransac_iters: int = 200
    seed_ahead: float = 3.0  # the seed region ends here, m
    max_track_len: float = 15.0
    min_track_len: float = 13.0  # forward coverage below this fails
    min_inliers: int = 30
    refit_every: int = 50
    bin_len: float = 0.5
    gauge_tol: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class EdgeConfig:
    """Voxel-plane segmentation and the edges / merged planes built on it."""

    voxel: float = 1.0
    min_voxel_points: int = 20
    planarity_max: float = 0.01
    dihedral_min_deg: float = 30.0
    edge_point_tol: float = 0.05
    line_rms_max: float = 0.05
    min_line_points: int = 10
    merge_angle_deg: float = 5.0
    merge_dist: float = 0.1
    plane_merge_angle_deg: float = 5.0
    plane_merge_offset: float = 0.1
    max_plane_support: int = 400
    min_plane_points: int = 40


@dataclass(frozen=True)
class MatchConfig:
    line_angle_deg: float = 10.0
    line_dist: float = 0.5
    plane_angle_deg: float = 5.0
    plane_offset: float = 0.25


# ---------------------------------------------------------------------------
# deskew
# ---------------------------------------------------------------------------


def deskew_scan(scan, start_state, samples, t_body_lidar=None):
    """Re-express every point at the sweep-end sensor pose.

    IMU poses are propagated across the sweep from ``start_state`` and
    linearly interpolated (positions lerped, orientations slerped) at each
    point's capture time. ``samples`` must start at the state's timestamp
    and cover the sweep.
    """
    ts, acc, gyr = _pack(samples)
    if ts.size < 2:
        raise InsufficientImuCoverage("deskew needs at least two IMU samples")
    if abs(ts[0] - start_state.timestamp) > 1e-6:
        raise InsufficientImuCoverage("IMU does not start at the given state")
    if ts[0] > scan.frame_start + 1e-6 or ts[-1] < scan.frame_end - 1e-6:
        raise InsufficientImuCoverage(
            "IMU covers [%.4f, %.4f] but sweep is [%.4f, %.4f]"
            % (ts[0], ts[-1], scan.frame_start, scan.frame_end)
        )
    pos, _, quat = propagate_states(start_state, ts, acc, gyr)
    if t_body_lidar is not None:
        from .geometry import quat_multiply

        pos = pos + quat_rotate(quat, np.broadcast_to(t_body_lidar.translation, pos.shape))
        quat = quat_multiply(quat, np.broadcast_to(t_body_lidar.rotation.quat_view, quat.shape))
    t_pt = scan.frame_start + scan.t_offset
    k = np.clip(np.searchsorted(ts, t_pt, side="right") - 1, 0, ts.size - 2)
    u = (t_pt - ts[k]) / (ts[k + 1] - ts[k])
    p_t = pos[k] + u[:, None] * (pos[k + 1] - pos[k])
    q_t = quat_slerp(quat[k], quat[k + 1], u)

    # sweep-end pose, interpolated the same way
    ke = int(np.clip(np.searchsorted(ts, scan.frame_end, side="right") - 1, 0, ts.size - 2))
    ue = (scan.frame_end - ts[ke]) / (ts[ke + 1] - ts[ke])
    p_e = pos[ke] + ue * (pos[ke + 1] - pos[ke])
    q_e = quat_slerp(quat[ke], quat[ke + 1], np.array(ue))

    world = quat_rotate(q_t, scan.points) + p_t
    from .geometry import quat_conjugate

    local = quat_rotate(quat_conjugate(q_e), world - p_e)
    duration = scan.frame_end - scan.frame_start
    return LidarScan(
        frame_start=scan.frame_start,
        frame_end=scan.frame_end,
        points=local,
        t_offset=np.full(scan.count, duration),
        intensity=None if scan.intensity is None else scan.intensity.copy(),
        labels=None if scan.labels is None else scan.labels.copy(),
    )


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def _moments(points):
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    return centroid, cov


def fit_infinite_line(points, kind="edge", indices=None):
    """Least-squares line through points via the principal axis.

    Needs at least two distinct points; raises DegenerateSpread otherwise.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        raise DegenerateSpread("line fit needs at least 2 points")
    centroid, cov = _moments(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] < 1e-16:
        raise DegenerateSpread("points coincide; no line direction")
    direction = evecs[:, 2]
    line = canonicalize_line(centroid, direction)
    s = (points - line.closest_point) @ line.direction
    perp = points - (line.closest_point + s[:, None] * line.direction[None, :])
    rms = float(np.sqrt(np.mean(np.sum(perp * perp, axis=1))))
    half = 0.5 * float(s.max() - s.min())
    return LineFeature(
        line=line,
        centroid=centroid,
        half_length=half,
        kind=kind,
        rms=rms,
        support_count=len(points),
        points=points,
        indices=None if indices is None else np.asarray(indices),
    )


def fit_plane(points, indices=None):
    """Least-squares plane via the smallest principal axis.

    Needs at least three non-collinear points.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < 3:
        raise DegenerateSpread("plane fit needs at least 3 points")
    centroid, cov = _moments(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] < 1e-14:
        raise DegenerateSpread("points are collinear; no plane normal")
    plane = Plane.from_point_normal(centroid, evecs[:, 0])
    sd = plane.signed_distance(points)
    return PlaneFeature(
        plane=plane,
        centroid=centroid,
        planarity=float(evals[0] / evals[1]),
        rms=float(np.sqrt(np.mean(sd * sd))),
        support_count=len(points),
        points=points,
        indices=None if indices is None else np.asarray(indices),
    )


# ---------------------------------------------------------------------------
# track bed and rails
# ---------------------------------------------------------------------------


def detect_track_bed(scan, cfg):
    """Select returns in the bed height band and fit the bed plane.

    Returns (indices, PlaneFeature). Raises NoBedPoints below
    ``cfg.min_bed_points``.
    """
    z = scan.points[:, 2]
    mask = np.abs(z + cfg.mount_height) <= cfg.bed_band
    idx = np.nonzero(mask)[0]
    if idx.size < cfg.min_bed_points:
        raise NoBedPoints("%d bed returns, need %d" % (idx.size, cfg.min_bed_points))
    return idx, fit_plane(scan.points[idx], indices=idx)


def _line_distances(points, p0, direction):
    rel = points - p0
    along = rel @ direction
    perp = rel - along[:, None] * direction[None, :]
    return np.linalg.norm(perp, axis=1), along


def _ransac_line(points, tol, iters, rng):
    """2-point RANSAC; returns (point, direction, inlier mask) of the best
    model by inlier count (first winner kept on ties)."""
    n = len(points)
    best_count = -1
    best = None
    for _ in range(iters):
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        d = points[j] - points[i]
        nd = np.linalg.norm(d)
        if nd < 1e-6:
            continue
        d = d / nd
        dist, _ = _line_distances(points, points[i], d)
        count = int(np.sum(dist < tol))
        if count > best_count:
            best_count = count
            best = (points[i].copy(), d.copy(), dist < tol)
    if best is None or best_count < 2:
        raise NoRailsFound("RANSAC found no line model")
    return best


def _grow_rail(points, seed_mask, line_feat, cfg):
    """Extend a seed fit bin-by-bin along the corridor, re-fitting every
    ``cfg.refit_every`` added points."""
    support = np.nonzero(seed_mask)[0].tolist()
    line = line_feat.line
    x = points[:, 0]
    seed_max = x[support].max()
    bins = np.arange(seed_max, x.max() + cfg.bin_len, cfg.bin_len)
    pending = 0
    in_support = seed_mask.copy()
    for b0 in bins:
        b1 = b0 + cfg.bin_len
        if b0 > cfg.max_track_len + 2.0:
            break
        sel = np.nonzero((x >= b0) & (x < b1) & ~in_support)[0]
        if sel.size == 0:
            continue
        d = line.distance_to(points[sel])
        add = sel[d <= cfg.rail_head_tol]
        if add.size:
            support.extend(add.tolist())
            in_support[add] = True
            pending += add.size
            if pending >= cfg.refit_every:
                line = fit_infinite_line(points[support], kind="rail").line
                pending = 0
    return np.asarray(support, dtype=int)


def _extract_one_rail(scan, heights, side, cfg, rng):
    pts = scan.points
    lateral = pts[:, 1] - side * cfg.gauge / 2.0
    cand = (
        (heights >= cfg.rail_height_min)
        & (heights <= cfg.rail_height_max)
        & (np.abs(lateral) <= cfg.lateral_window)
    )
    cand_idx = np.nonzero(cand)[0]
    if cand_idx.size < cfg.min_inliers:
        raise NoRailsFound(
            "side %+d: %d candidate returns, need %d" % (side, cand_idx.size, cfg.min_inliers)
        )
    cpts = pts[cand_idx]
    p0, d0, inl = _ransac_line(cpts, cfg.rail_head_tol, cfg.ransac_iters, rng)

    seed_mask = inl & (cpts[:, 0] <= cfg.seed_ahead)
    if seed_mask.sum() < 2:
        raise NoRailsFound("side %+d: empty seed region" % side)
    seed_line = fit_infinite_line(cpts[seed_mask], kind="rail")
    support = _grow_rail(cpts, seed_mask, seed_line, cfg)

    feat = fit_infinite_line(cpts[support], kind="rail")
    # clip to the forward window measured from the sensor's foot point
    s = (cpts[support] - feat.line.closest_point) @ feat.line.direction
    if feat.line.direction[0] < 0.0:
        s = -s
    keep = support[(s >= -1.0) & (s <= cfg.max_track_len)]
    if keep.size < cfg.min_inliers:
        raise NoRailsFound("side %+d: %d inliers after clipping" % (side, keep.size))
    feat = fit_infinite_line(cpts[keep], kind="rail")
    # final straightness gate: supports must sit within the head width
    d_final = feat.line.distance_to(cpts[keep])
    keep = keep[d_final <= cfg.rail_head_tol]
    if keep.size < cfg.min_inliers:
        raise NoRailsFound("side %+d: %d inliers within head tolerance" % (side, keep.size))
    feat = fit_infinite_line(cpts[keep], kind="rail", indices=cand_idx[keep])
    s = (cpts[keep] - feat.line.closest_point) @ feat.line.direction
    if feat.line.direction[0] < 0.0:
        s = -s
    coverage = float(s.max())
    if coverage < cfg.min_track_len:
        raise NoRailsFound(
            "side %+d: forward coverage %.2f m below %.2f m" % (side, coverage, cfg.min_track_len)
        )
    return feat


def extract_rail_tracks(scan, cfg, rng=None):
    """Extract the left/right running-rail lines.

    Candidates sit in the configured height band above the detected bed
    plane inside lateral windows around the two nominal rail offsets. Each
    side runs a 2-point RANSAC, grows the fit from the near-field seed
    region, and keeps at most ``max_track_len`` meters of support ahead of
    the sensor.

    Returns (left, right) LineFeatures. Raises NoRailsFound when a side
    cannot be supported and AsymmetricRails when the recovered gauge is off
    by more than ``cfg.gauge_tol``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    _, bed = detect_track_bed(scan, cfg)
    heights = bed.plane.signed_distance(scan.points)
    left = _extract_one_rail(scan, heights, +1, cfg, rng)
    right = _extract_one_rail(scan, heights, -1, cfg, rng)

    dl = left.line.direction
    dr = right.line.direction
    if float(dl @ dr) < 0.0:
        dr = -dr
    mean_dir = dl + dr
    mean_dir = mean_dir / np.linalg.norm(mean_dir)
    dc = left.line.closest_point - right.line.closest_point
    gauge = float(np.linalg.norm(dc - (dc @ mean_dir) * mean_dir))
    if abs(gauge - cfg.gauge) > cfg.gauge_tol:
        raise AsymmetricRails(
            "recovered gauge %.3f m vs configured %.3f m" % (gauge, cfg.gauge)
        )
    return left, right


# ---------------------------------------------------------------------------
# voxel planes, edges, merged planes
# ---------------------------------------------------------------------------


def _voxel_planes(points, cfg):
    """Per-voxel PCA plane fits.

    Returns a dict with the planar voxels' integer keys, centroids,
    normals, planarities, and point index slices.
    """
    keys = np.floor(points / cfg.voxel).astype(np.int64)
    kmin = keys.min(axis=0)
    km = keys - kmin
    dims = km.max(axis=0) + 1
    flat = (km[:, 0] * dims[1] + km[:, 1]) * dims[2] + km[:, 2]
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    nv = uniq.size

    sums = np.empty((nv, 3))
    for c in range(3):
        sums[:, c] = np.bincount(inv, weights=points[:, c], minlength=nv)
    mom = np.empty((nv, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            m = np.bincount(inv, weights=points[:, a] * points[:, b], minlength=nv)
            mom[:, a, b] = m
            mom[:, b, a] = m
    mean = sums / counts[:, None]
    cov = mom / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]

    ok = counts >= cfg.min_voxel_points
    evals = np.full((nv, 3), np.nan)
    evecs = np.full((nv, 3, 3), np.nan)
    if ok.any():
        ev, evec = np.linalg.eigh(cov[ok])
        evals[ok] = ev
        evecs[ok] = evec
    with np.errstate(invalid="ignore", divide="ignore"):
        planarity = evals[:, 0] / evals[:, 1]
    planar = ok & np.isfinite(planarity) & (planarity < cfg.planarity_max)

    order = np.argsort(inv, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return {
        "keys": km[order[bounds[:-1]]] + kmin,  # one representative key per voxel
        "flat": uniq,
        "dims": dims,
        "kmin": kmin,
        "mean": mean,
        "normal": evecs[:, :, 0],
        "planarity": planarity,
        "planar": planar,
        "order": order,
        "bounds": bounds,
        "counts": counts,
    }


_NEIGHBOR_OFFSETS = np.array(
    [
        [0, 0, 1],
        [0, 1, -1],
        [0, 1, 0],
        [0, 1, 1],
        [1, -1, -1],
        [1, -1, 0],
        [1, -1, 1],
        [1, 0, -1],
        [1, 0, 0],
        [1, 0, 1],
        [1, 1, -1],
        [1, 1, 0],
        [1, 1, 1],
    ]
)


def _voxel_point_idx(table, v):
    b = table["bounds"]
    return table["order"][b[v] : b[v + 1]]


def _planar_pairs(table, max_angle_cos):
    """Adjacent planar-voxel pairs whose normals differ by more than the
    given angle (cosine threshold on |n1 . n2|)."""
    flat_to_row = {int(f): i for i, f in enumerate(table["flat"])}
    dims = table["dims"]
    kmin = table["kmin"]
    pairs = []
    planar_rows = np.nonzero(table["planar"])[0]
    for v in planar_rows:
        k = table["keys"][v] - kmin
        for off in _NEIGHBOR_OFFSETS:
            nk = k + off
            if np.any(nk < 0) or np.any(nk >= dims):
                continue
            nflat = (nk[0] * dims[1] + nk[1]) * dims[2] + nk[2]
            w = flat_to_row.get(int(nflat))
            if w is None or not table["planar"][w]:
                continue
            c = abs(float(table["normal"][v] @ table["normal"][w]))
            if c < max_angle_cos:
                pairs.append((int(v), int(w)))
    return pairs


def extract_edges(scan, cfg):
    """Depth-continuous edge lines from intersecting voxel planes.

    Adjacent voxel-plane pairs with a dihedral angle above
    ``cfg.dihedral_min_deg`` propose their intersection line; points of
    both voxels near both planes and the line become its support. Nearby
    duplicates are merged. Returns a list of LineFeatures (kind "edge").
    """
    pts = scan.points
    table = _voxel_planes(pts, cfg)
    cos_max = math.cos(math.radians(cfg.dihedral_min_deg))
    candidates = []
    for v, w in _planar_pairs(table, cos_max):
        n1, n2 = table["normal"][v], table["normal"][w]
        c1, c2 = table["mean"][v], table["mean"][w]
        u = np.cross(n1, n2)
        nu = np.linalg.norm(u)
        if nu < 1e-9:
            continue
        u = u / nu
        # minimum-norm point satisfying both plane equations
        A = np.stack([n1, n2])
        b = np.array([n1 @ c1, n2 @ c2])
        x0 = A.T @ np.linalg.solve(A @ A.T, b)
        idx = np.concatenate([_voxel_point_idx(table, v), _voxel_point_idx(table, w)])
        p = pts[idx]
        sd1 = np.abs((p - c1) @ n1)
        sd2 = np.abs((p - c2) @ n2)
        dist, _ = _line_distances(p, x0, u)
        keep = (sd1 <= cfg.edge_point_tol) & (sd2 <= cfg.edge_point_tol) & (
            dist <= cfg.edge_point_tol
        )
        if int(keep.sum()) < cfg.min_line_points:
            continue
        feat = fit_infinite_line(p[keep], kind="edge", indices=idx[keep])
        if feat.rms <= cfg.line_rms_max:
            candidates.append(feat)

    merged = []
    cos_merge = math.cos(math.radians(cfg.merge_angle_deg))
    for cand in candidates:
        hit = None
        for i, acc in enumerate(merged):
            if abs(float(cand.line.direction @ acc.line.direction)) < cos_merge:
                continue
            if acc.line.distance_to(cand.line.closest_point) > cfg.merge_dist:
                continue
            hit = i
            break
        if hit is None:
            merged.append(cand)
        else:
            acc = merged[hit]
            idx = np.unique(np.concatenate([acc.indices, cand.indices]))
            merged[hit] = fit_infinite_line(pts[idx], kind="edge", indices=idx)
    return merged


def extract_planes(scan, cfg):
    """Merged planar patches from the voxel-plane segmentation.

    Adjacent coplanar voxels (normal angle within
    ``cfg.plane_merge_angle_deg``, offsets within
    ``cfg.plane_merge_offset``) are unioned and refit. Support is
    subsampled to ``cfg.max_plane_support`` points per feature.
    """
    pts = scan.points
    table = _voxel_planes(pts, cfg)
    planar_rows = np.nonzero(table["planar"])[0]
    if planar_rows.size == 0:
        return []
    row_pos = {int(v): i for i, v in enumerate(planar_rows)}
    parent = list(range(planar_rows.size))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    cos_same = math.cos(math.radians(cfg.plane_merge_angle_deg))
    for v, w in _planar_pairs(table, 2.0):  # every adjacent planar pair
        n1, n2 = table["normal"][v], table["normal"][w]
        c = float(n1 @ n2)
        if abs(c) < cos_same:
            continue
        n2s = n2 if c >= 0 else -n2
        d1 = -float(n1 @ table["mean"][v])
        d2 = -float(n2s @ table["mean"][w])
        if abs(d1 - d2) > cfg.plane_merge_offset:
            continue
        a, b = find(row_pos[int(v)]), find(row_pos[int(w)])
        if a != b:
            parent[max(a, b)] = min(a, b)

    groups = {}
    for i, v in enumerate(planar_rows):
        groups.setdefault(find(i), []).append(int(v))

    feats = []
    for root in sorted(groups):
        idx = np.concatenate([_voxel_point_idx(table, v) for v in groups[root]])
        if idx.size < cfg.min_plane_points:
            continue
        if idx.size > cfg.max_plane_support:
            stride = idx.size // cfg.max_plane_support + 1
            idx = np.sort(idx)[::stride]
        if idx.size < cfg.min_plane_points:
            continue
        try:
            feat = fit_plane(pts[idx], indices=idx)
        except DegenerateSpread:
            continue
        if feat.planarity < cfg.planarity_max:
            feats.append(feat)
    return feats


# ---------------------------------------------------------------------------
# association
# ---------------------------------------------------------------------------


def _greedy(cands):
    """cands: list of (primary_key, i, j) sorted ascending; greedy 1-1."""
    cands.sort()
    used_i = set()
    used_j = set()
    out = []
    for _, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append((i, j))
    return out


def match_lines(prev, curr, cfg=MatchConfig()):
    """Greedy mutual-nearest line pairs.

    Admissible pairs differ by less than ``line_angle_deg`` in (undirected)
    direction and ``line_dist`` in centroid distance; ties break on smaller
    centroid distance, then lower indices. Returns [(i_prev, j_curr)].
    """
    if not prev or not curr:
        return []
    cos_min = math.cos(math.radians(cfg.line_angle_deg))
    dp = np.stack([f.line.direction for f in prev])
    dc = np.stack([f.line.direction for f in curr])
    cp = np.stack([f.centroid for f in prev])
    cc = np.stack([f.centroid for f in curr])
    ang_ok = np.abs(dp @ dc.T) > cos_min
    dist = np.linalg.norm(cp[:, None, :] - cc[None, :, :], axis=2)
    cands = [
        (float(dist[i, j]), i, j)
        for i, j in zip(*np.nonzero(ang_ok & (dist < cfg.line_dist)))
    ]
    return _greedy(cands)


def match_planes(prev, curr, cfg=MatchConfig()):
    """Greedy mutual-nearest plane pairs on (normal angle, |offset diff|)."""
    if not prev or not curr:
        return []
    cos_min = math.cos(math.radians(cfg.plane_angle_deg))
    npv = np.stack([f.plane.normal for f in prev])
    ncv = np.stack([f.plane.normal for f in curr])
    dpv = np.array([f.plane.distance for f in prev])
    dcv = np.array([f.plane.distance for f in curr])
    ang_ok = npv @ ncv.T > cos_min
    ddist = np.abs(dpv[:, None] - dcv[None, :])
    cands = [
        (float(ddist[i, j]), i, j)
        for i, j in zip(*np.nonzero(ang_ok & (ddist < cfg.plane_offset)))
    ]
    return _greedy(cands)
