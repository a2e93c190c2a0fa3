"""Partial track registration from lane line segments.

Per frame this constructs the one-degree-of-freedom family of camera
calibrations consistent with the observed lane pencil, parametrized by
azimuth, then resolves the remaining freedom over a sequence by
requiring a shared (static) camera position.

Construction per azimuth: the roll-free lane vanishing point offset from
the principal point is ``f * (tan az / cos el, tan el)``, so focal length
and roll act as a pure similarity about the principal point.  Matching
the observed vanishing point therefore fixes (focal, roll) in closed
form for any elevation, the camera (y, z) position follows from a linear
2x2 line-incidence system on two lane boundaries, and elevation is the
bracketed root of a third boundary line's residual.  Two observed
boundaries leave elevation genuinely free; in that case the frame solve
pins roll to zero at a reference azimuth.  Either way the family is
completed against the reference camera's own (exactly consistent) lane
pencil, which all members then reproduce identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import (
    CameraCalibration,
    Extrinsics,
    Intrinsics,
    project_points,
    rotation_world_to_camera,
    vanishing_point_of_direction,
)
from .optimize import bisect_many, golden_section

_LANE_DIRECTION = np.array([1.0, 0.0, 0.0])
_EL_TOL_DEG = 6e-8  # ~1e-9 rad


class RegistrationError(Exception):
    """Base class for registration failures."""


class InsufficientSegmentsError(RegistrationError):
    """Fewer segments / distinct lanes than the construction needs."""


class ParallelSegmentsError(RegistrationError):
    """All segments mutually parallel; no finite vanishing point."""


class DegenerateAzimuthError(RegistrationError):
    """Azimuth too close to 0/180 (vanishing point at the principal
    point) or 90 degrees (vanishing point at infinity)."""


class NoBracketError(RegistrationError):
    """The elevation scan could not bracket a solution."""


class OutOfRangeError(RegistrationError):
    """Requested camera height outside the family's attainable range."""


class NoOverlapError(RegistrationError):
    """Frames' attainable height ranges do not intersect."""


class UnusableFrameError(RegistrationError):
    """No azimuth in the sweep yields a valid calibration."""


@dataclass(frozen=True)
class TrackModel:
    """Straight-track lane geometry: boundaries {y = i * lane_width, z = 0}."""

    lane_width: float = 1.22
    num_lanes: int = 8

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        if self.num_lanes < 1:
            raise ValueError("num_lanes must be at least 1")

    @property
    def boundary_ys(self) -> np.ndarray:
        return np.arange(self.num_lanes + 1) * self.lane_width

    def boundary_y(self, index: int) -> float:
        return index * self.lane_width


@dataclass(frozen=True, eq=False)
class LaneSegment:
    """Observed 2D segment on a lane boundary line."""

    a: np.ndarray
    b: np.ndarray
    lane_index: int

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(2)
        b = np.asarray(self.b, dtype=float).reshape(2)
        if np.allclose(a, b):
            raise ValueError("segment endpoints must be distinct")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True, eq=False)
class LaneObservation:
    """All lane segments detected in one frame."""

    frame_id: int
    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def distinct_lanes(self) -> list[int]:
        return sorted({s.lane_index for s in self.segments})

    def lowest_in_image_index(self) -> int:
        """Lane index of the segment whose midpoint sits lowest in the
        image (largest v); for a camera below the lanes this is the
        nearest boundary."""
        mids = [0.5 * (s.a[1] + s.b[1]) for s in self.segments]
        return self.segments[int(np.argmax(mids))].lane_index

    def shifted(self, offset: int) -> "LaneObservation":
        """Shift every lane index by a constant; relative differences are
        preserved, so this moves the solved camera laterally by whole
        lane widths only."""
        if offset == 0:
            return self
        segs = tuple(LaneSegment(s.a, s.b, s.lane_index - offset) for s in self.segments)
        return LaneObservation(self.frame_id, segs)

    def reanchored(self) -> "LaneObservation":
        """Shift lane indices so the lowest segment in the image is lane 0."""
        if not self.segments:
            return self
        return self.shifted(self.lowest_in_image_index())


# ---------------------------------------------------------------------------
# vanishing point estimation


def _segment_lines(segments) -> np.ndarray:
    """Normalized homogeneous image lines (m, 3), unit (a, b) part."""
    a = np.stack([s.a for s in segments])
    b = np.stack([s.b for s in segments])
    ah = np.concatenate([a, np.ones((len(a), 1))], axis=1)
    bh = np.concatenate([b, np.ones((len(b), 1))], axis=1)
    lines = np.cross(ah, bh)
    norm = np.hypot(lines[:, 0], lines[:, 1])
    return lines / norm[:, None]


def _all_parallel(segments, tol_rad: float = 1e-6) -> bool:
    d = np.stack([s.b - s.a for s in segments])
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    # |sin| of the pairwise angle between the undirected lines
    cross = np.abs(d[:, None, 0] * d[None, :, 1] - d[:, None, 1] * d[None, :, 0])
    return bool(np.max(cross) < tol_rad)


def estimate_vanishing_point(segments) -> np.ndarray:
    """Common intersection point of the segments' infinite lines.

    Two segments: exact homogeneous cross product.  More: least-squares
    point minimizing the sum of squared perpendicular distances to each
    line, solved in shifted/scaled coordinates for conditioning.
    """
    segments = list(segments)
    if len(segments) < 2:
        raise InsufficientSegmentsError(f"need >= 2 segments, got {len(segments)}")
    if _all_parallel(segments):
        raise ParallelSegmentsError("all segments are mutually parallel")
    if len(segments) == 2:
        l1, l2 = _segment_lines(segments)
        v = np.cross(l1, l2)
        if abs(v[2]) <= 1e-12:
            raise ParallelSegmentsError("segments are parallel within tolerance")
        return v[:2] / v[2]
    pts = np.concatenate([np.stack([s.a for s in segments]), np.stack([s.b for s in segments])])
    center = pts.mean(axis=0)
    scale = np.mean(np.linalg.norm(pts - center, axis=1))
    scale = scale if scale > 0 else 1.0
    normed = [
        LaneSegment((s.a - center) / scale, (s.b - center) / scale, s.lane_index)
        for s in segments
    ]
    lines = _segment_lines(normed)
    sol, *_ = np.linalg.lstsq(lines[:, :2], -lines[:, 2], rcond=None)
    return sol * scale + center


def fit_pencil_line(v0: np.ndarray, endpoints: np.ndarray) -> np.ndarray:
    """Best line through ``v0``: minimizes squared perpendicular distance
    to the endpoints (m, 2).  Returns a normalized homogeneous line."""
    u = np.asarray(endpoints, dtype=float) - v0
    m = u.T @ u
    _, vecs = np.linalg.eigh(m)
    direction = vecs[:, -1]
    n = np.array([-direction[1], direction[0]])
    return np.array([n[0], n[1], -(n @ v0)])


@dataclass(frozen=True, eq=False)
class VpLookupGrid:
    """Vanishing points of the lane direction over an (azimuth, elevation)
    sweep at fixed FOV; used to bracket the per-azimuth solves."""

    azimuths_deg: np.ndarray
    elevations_deg: np.ndarray
    points: np.ndarray  # (na, ne, 2), NaN where the direction is at infinity


def build_vp_lookup_grid(
    intrinsics0: Intrinsics,
    azimuth_range_deg,
    elevation_range_deg,
    step_deg: float = 1.0,
) -> VpLookupGrid:
    az = np.arange(azimuth_range_deg[0], azimuth_range_deg[1] + 1e-9, step_deg)
    el = np.arange(elevation_range_deg[0], elevation_range_deg[1] + 1e-9, step_deg)
    R = rotation_world_to_camera(az[:, None], el[None, :], 0.0)
    h = (R @ _LANE_DIRECTION) @ intrinsics0.K.T
    w = h[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = h[..., :2] / w[..., None]
    pts[np.abs(w) <= 1e-12] = np.nan
    return VpLookupGrid(az, el, pts)


# ---------------------------------------------------------------------------
# closed-form member solve (vectorized core)


def _solve_core(lines, anchor_ys, dv, pp, az_deg, el_deg):
    """Soлve (focal, roll, cam_y, cam_z, check residual) for broadcastable
    inputs.

    ``lines`` (..., 3, 3) pencil lines (two anchors + one check line),
    ``anchor_ys`` (..., 3) their world y, ``dv`` (..., 2) vanishing point
    minus principal point, ``pp`` (2,), ``az_deg``/``el_deg`` (...).
    All leading shapes must broadcast together.
    """
    az = np.deg2rad(np.asarray(az_deg, dtype=float))
    el = np.deg2rad(np.asarray(el_deg, dtype=float))
    vt_u = np.tan(az) / np.cos(el)
    vt_v = np.tan(el)
    vt_norm = np.hypot(vt_u, vt_v)
    dv = np.asarray(dv, dtype=float)
    dv_norm = np.hypot(dv[..., 0], dv[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        f = dv_norm / vt_norm
    roll = np.arctan2(vt_v, vt_u) - np.arctan2(dv[..., 1], dv[..., 0])
    roll = np.arctan2(np.sin(roll), np.cos(roll))
    roll_deg = np.rad2deg(roll)
    az_b, el_b, roll_b = np.broadcast_arrays(
        np.asarray(az_deg, float), np.asarray(el_deg, float), roll_deg
    )
    shape = az_b.shape
    R = rotation_world_to_camera(az_b, el_b, roll_b)
    fb = np.broadcast_to(f, shape)
    lines_b = np.broadcast_to(lines, shape + (3, 3))
    ys_b = np.broadcast_to(anchor_ys, shape + (3,))
    # rows[..., i, :] = l_i^T K R  with K = [[f,0,cx],[0,f,cy],[0,0,1]]
    lk = np.empty(shape + (3, 3))
    lk[..., 0] = lines_b[..., 0] * fb[..., None]
    lk[..., 1] = lines_b[..., 1] * fb[..., None]
    lk[..., 2] = lines_b[..., 0] * pp[0] + lines_b[..., 1] * pp[1] + lines_b[..., 2]
    rows = lk @ R
    b = rows[..., :, 1] * ys_b
    r0, r1, r2 = rows[..., 0, :], rows[..., 1, :], rows[..., 2, :]
    det = r0[..., 1] * r1[..., 2] - r0[..., 2] * r1[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cam_y = (b[..., 0] * r1[..., 2] - b[..., 1] * r0[..., 2]) / det
        cam_z = (r0[..., 1] * b[..., 1] - r1[..., 1] * b[..., 0]) / det
        residual = (b[..., 2] - (r2[..., 1] * cam_y + r2[..., 2] * cam_z)) / fb
    valid = (
        np.isfinite(residual)
        & np.isfinite(cam_y)
        & np.isfinite(cam_z)
        & (np.abs(det) > 1e-15)
        & np.isfinite(fb)
        & (fb > 1e-3)
    )
    return {
        "focal_px": fb.copy(),
        "roll_deg": np.broadcast_to(roll_deg, shape).copy(),
        "cam_y": cam_y,
        "cam_z": cam_z,
        "residual": np.where(valid, residual, np.nan),
        "valid": valid,
    }


def _physical(sol, el_deg) -> np.ndarray:
    """Mask of admissible members: above ground, not upside down, sane FOV."""
    return (
        sol["valid"]
        & (sol["cam_z"] > 1e-3)
        & (np.abs(sol["roll_deg"]) < 90.0)
        & (sol["focal_px"] > 10.0)
        & (sol["focal_px"] < 1e7)
        & (np.abs(np.asarray(el_deg)) < 89.0)
    )


@dataclass(frozen=True, eq=False)
class _SolverContext:
    """Per-frame constants of the member solve."""

    v0: np.ndarray          # (2,) observed vanishing point
    pp: np.ndarray          # (2,) principal point
    image_width: int
    image_height: int
    lines: np.ndarray       # (3, 3) pencil lines: two anchors + one check
    anchor_ys: np.ndarray   # (3,) world y of those boundaries
    el_grid_deg: np.ndarray

    @property
    def dv(self) -> np.ndarray:
        return self.v0 - self.pp

    def solve(self, az_deg, el_deg):
        return _solve_core(self.lines, self.anchor_ys, self.dv, self.pp, az_deg, el_deg)


def _empty_members(n: int) -> dict:
    return {
        "el_deg": np.full(n, np.nan),
        "focal_px": np.full(n, np.nan),
        "roll_deg": np.full(n, np.nan),
        "cam_y": np.full(n, np.nan),
        "cam_z": np.full(n, np.nan),
        "valid": np.zeros(n, dtype=bool),
    }


def _solve_members(ctx: _SolverContext, az_deg: np.ndarray) -> dict:
    """Solve the family member at each azimuth (vectorized).

    Elevation is the bracketed root of the check-line residual; among
    multiple admissible roots the one with the smallest |roll| wins.
    Returns dict of arrays with NaN where no member exists.
    """
    az_deg = np.asarray(az_deg, dtype=float)
    na = az_deg.size
    grid = ctx.solve(az_deg[:, None], ctx.el_grid_deg[None, :])
    res = grid["residual"]
    ok = grid["valid"]
    sgn_change = ok[:, :-1] & ok[:, 1:] & (np.sign(res[:, :-1]) * np.sign(res[:, 1:]) < 0)
    az_idx, cell_idx = np.nonzero(sgn_change)
    if az_idx.size == 0:
        return _empty_members(na)
    lo = ctx.el_grid_deg[cell_idx]
    hi = ctx.el_grid_deg[cell_idx + 1]
    az_flat = az_deg[az_idx]

    def f(el):
        return ctx.solve(az_flat, el)["residual"]

    roots = bisect_many(f, lo, hi, _EL_TOL_DEG)
    good = np.isfinite(roots)
    az_idx, roots = az_idx[good], roots[good]
    sol = ctx.solve(az_deg[az_idx], roots)
    keep = _physical(sol, roots)
    az_idx, roots = az_idx[keep], roots[keep]
    out = _empty_members(na)
    if az_idx.size == 0:
        return out
    score = np.abs(sol["roll_deg"][keep])
    order = np.lexsort((score, az_idx))
    az_sorted = az_idx[order]
    first = np.ones(az_sorted.size, dtype=bool)
    first[1:] = az_sorted[1:] != az_sorted[:-1]
    pick = order[first]
    tgt = az_idx[pick]
    out["el_deg"][tgt] = roots[pick]
    for key in ("focal_px", "roll_deg", "cam_y", "cam_z"):
        out[key][tgt] = sol[key][keep][pick]
    out["valid"][tgt] = True
    return out


def _member_calibration(ctx: _SolverContext, az_deg: float, sol: dict, idx) -> CameraCalibration:
    intr = Intrinsics(
        ctx.image_width,
        ctx.image_height,
        Intrinsics.hfov_for_focal(float(sol["focal_px"][idx]), ctx.image_width),
    )
    ext = Extrinsics(
        azimuth_deg=float(az_deg),
        elevation_deg=float(sol["el_deg"][idx]),
        roll_deg=float(sol["roll_deg"][idx]),
        camera_center=np.array([0.0, float(sol["cam_y"][idx]), float(sol["cam_z"][idx])]),
    )
    return CameraCalibration(intr, ext)


# ---------------------------------------------------------------------------
# per-frame family


@dataclass(eq=False)
class CalibrationFamily:
    """Azimuth-indexed set of scene-consistent calibrations for one frame.

    ``solve_at`` re-solves at arbitrary (continuous) azimuth; the grid is
    both the dense representation and the bracket source for that.
    Camera height is strictly monotone in azimuth over the stored sweep
    (verified at construction).
    """

    frame_id: int
    v0: np.ndarray
    track: TrackModel
    reference: CameraCalibration
    azimuths_deg: np.ndarray
    el_deg: np.ndarray
    roll_deg: np.ndarray
    focal_px: np.ndarray
    cam_y: np.ndarray
    cam_z: np.ndarray
    context: _SolverContext
    residual_px_mean: float
    residual_px_max: float
    height_increasing: bool = field(init=False)

    def __post_init__(self):
        dz = np.diff(self.cam_z)
        if dz.size and not (np.all(dz > 0) or np.all(dz < 0)):
            raise UnusableFrameError(
                f"frame {self.frame_id}: camera height is not strictly monotone in azimuth"
            )
        self.height_increasing = bool(dz.size == 0 or dz[0] > 0)

    def __len__(self) -> int:
        return self.azimuths_deg.size

    @property
    def heights(self) -> np.ndarray:
        return self.cam_z

    @property
    def height_range(self) -> tuple[float, float]:
        return float(self.cam_z.min()), float(self.cam_z.max())

    def calibration_at_index(self, i: int) -> CameraCalibration:
        sol = {
            "el_deg": self.el_deg,
            "focal_px": self.focal_px,
            "roll_deg": self.roll_deg,
            "cam_y": self.cam_y,
            "cam_z": self.cam_z,
        }
        return _member_calibration(self.context, float(self.azimuths_deg[i]), sol, i)

    def calibrations(self) -> list[CameraCalibration]:
        return [self.calibration_at_index(i) for i in range(len(self))]

    def _el_bracket(self, az_deg: float) -> tuple[float, float]:
        az = self.azimuths_deg
        j = int(np.clip(np.searchsorted(az, az_deg), 1, az.size - 1))
        lo_i, hi_i = max(j - 1, 0), min(j + 1, az.size - 1)
        els = self.el_deg[lo_i : hi_i + 1]
        margin = max(0.5, 2.0 * float(np.ptp(els)))
        return float(els.min() - margin), float(els.max() + margin)

    def _solve_scalar(self, az_deg: float) -> dict:
        lo, hi = self._el_bracket(az_deg)
        az_arr = np.array([az_deg])

        def f(el):
            return self.context.solve(az_arr, el)["residual"]

        for _ in range(3):
            flo, fhi = f(np.array([lo]))[0], f(np.array([hi]))[0]
            if np.isfinite(flo) and np.isfinite(fhi) and flo * fhi <= 0:
                break
            width = hi - lo
            lo, hi = lo - width, hi + width
        else:
            members = _solve_members(self.context, az_arr)
            if not members["valid"][0]:
                raise NoBracketError(f"no elevation bracket at azimuth {az_deg:.3f}")
            return members
        root = bisect_many(f, np.array([lo]), np.array([hi]), _EL_TOL_DEG)
        sol = self.context.solve(az_arr, root)
        sol["el_deg"] = root
        if not _physical(sol, root)[0]:
            raise NoBracketError(f"no admissible member at azimuth {az_deg:.3f}")
        return sol

    def solve_at(self, az_deg: float) -> CameraCalibration:
        """Member at an arbitrary azimuth inside the family's sweep."""
        return _member_calibration(self.context, az_deg, self._solve_scalar(az_deg), 0)

    def height_at(self, az_deg: float) -> float:
        return float(self._solve_scalar(az_deg)["cam_z"][0])

    def azimuth_for_height(self, h: float, tol_m: float = 1e-7) -> float:
        """Azimuth whose member has camera height h (monotone bisection)."""
        zmin, zmax = self.height_range
        if not zmin - 1e-9 <= h <= zmax + 1e-9:
            raise OutOfRangeError(
                f"height {h:.4f} outside attainable range [{zmin:.4f}, {zmax:.4f}]"
            )
        zs = self.cam_z if self.height_increasing else self.cam_z[::-1]
        azs = self.azimuths_deg if self.height_increasing else self.azimuths_deg[::-1]
        j = int(np.clip(np.searchsorted(zs, h), 1, zs.size - 1))
        lo, hi = sorted((float(azs[j - 1]), float(azs[j])))
        step = float(np.mean(np.diff(self.azimuths_deg))) if len(self) > 1 else 1.0
        az_min, az_max = float(self.azimuths_deg[0]), float(self.azimuths_deg[-1])
        f_lo = self.height_at(lo) - h
        if abs(f_lo) <= tol_m:
            return lo
        f_hi = self.height_at(hi) - h
        if abs(f_hi) <= tol_m:
            return hi
        # grid heights and re-solved heights differ at solver tolerance, so
        # the root can sit just outside the nominal cell: widen as needed
        for _ in range(4):
            if np.sign(f_lo) != np.sign(f_hi):
                break
            lo = max(az_min, lo - step)
            hi = min(az_max, hi + step)
            f_lo = self.height_at(lo) - h
            f_hi = self.height_at(hi) - h
            if abs(f_lo) <= tol_m:
                return lo
            if abs(f_hi) <= tol_m:
                return hi
        else:
            raise OutOfRangeError(f"height {h:.4f} not bracketed along the family")
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            fm = self.height_at(mid) - h
            if abs(fm) <= tol_m:
                return mid
            if np.sign(f_lo) != np.sign(fm):
                hi = mid
            else:
                lo, f_lo = mid, fm
        return 0.5 * (lo + hi)


def lane_fit_residuals(
    cal: CameraCalibration, observation: LaneObservation, track: TrackModel
) -> np.ndarray:
    """Perpendicular pixel distance of every segment endpoint to the
    calibration's projected boundary line of that segment's lane."""
    vp = vanishing_point_of_direction(cal, _LANE_DIRECTION)
    vph = np.array([vp[0], vp[1], 1.0])
    lanes = observation.distinct_lanes()
    # anchor each world boundary line at several x values, keep one with
    # positive depth per lane
    xs = np.array([0.0, 60.0, -60.0, 150.0, -150.0])
    pts = np.array([[x, track.boundary_y(i), 0.0] for i in lanes for x in xs])
    uv, depth = project_points(cal, pts)
    uv = uv.reshape(len(lanes), xs.size, 2)
    depth = depth.reshape(len(lanes), xs.size)
    line_of: dict[int, np.ndarray] = {}
    for k, lane in enumerate(lanes):
        front = np.nonzero(depth[k] > 1e-6)[0]
        if front.size == 0:
            line_of[lane] = None
            continue
        q = uv[k, front[0]]
        line = np.cross(vph, np.array([q[0], q[1], 1.0]))
        line_of[lane] = line / np.hypot(line[0], line[1])
    dists = []
    for seg in observation.segments:
        line = line_of.get(seg.lane_index)
        if line is None:
            dists.extend([np.inf, np.inf])
            continue
        for e in (seg.a, seg.b):
            dists.append(abs(line[0] * e[0] + line[1] * e[1] + line[2]))
    return np.asarray(dists)


def _reference_candidates(side_low: bool, cfg: RunConfig) -> list[float]:
    base = [45.0, 35.0, 55.0, 25.0, 65.0, 15.0, 75.0, 10.0, 80.0, 7.0]
    lo, hi = cfg.azimuth_sweep_deg
    excl = cfg.azimuth_exclusion_halfwidth_deg
    cands = [a if side_low else 180.0 - a for a in base]
    return [a for a in cands if lo <= a <= hi and abs(a - 90.0) > excl]


def _raw_pencil(observation: LaneObservation, v0: np.ndarray, track: TrackModel):
    """Per-distinct-lane pencil lines fitted through v0, plus world ys."""
    by_lane: dict[int, list[np.ndarray]] = {}
    for seg in observation.segments:
        by_lane.setdefault(seg.lane_index, []).extend([seg.a, seg.b])
    lanes = sorted(by_lane)
    lines = {i: fit_pencil_line(v0, np.stack(by_lane[i])) for i in lanes}
    ys = {i: track.boundary_y(i) for i in lanes}
    return lanes, lines, ys


def _context_for(v0, intrinsics0: Intrinsics, lines3, ys3, el_grid) -> _SolverContext:
    return _SolverContext(
        v0=np.asarray(v0, float),
        pp=intrinsics0.principal_point,
        image_width=intrinsics0.image_width,
        image_height=intrinsics0.image_height,
        lines=np.stack(lines3),
        anchor_ys=np.asarray(ys3, float),
        el_grid_deg=el_grid,
    )


def _calibration_from_el(
    ctx: _SolverContext, az_deg: float, el_deg: float, lanes=None, line_map=None, y_map=None
) -> CameraCalibration | None:
    sol = ctx.solve(np.array([az_deg]), np.array([el_deg]))
    sol["el_deg"] = np.array([el_deg])
    if not _physical(sol, np.array([el_deg]))[0]:
        return None
    cam_y, cam_z = float(sol["cam_y"][0]), float(sol["cam_z"][0])
    if lanes is not None and len(lanes) > 3:
        # refit (y, z) on all observed lanes by linear least squares
        f = float(sol["focal_px"][0])
        roll = float(sol["roll_deg"][0])
        R = rotation_world_to_camera(az_deg, el_deg, roll)
        K = np.array([[f, 0, ctx.pp[0]], [0, f, ctx.pp[1]], [0, 0, 1.0]])
        KR = K @ R
        rows, rhs = [], []
        for i in lanes:
            r = line_map[i] @ KR
            rows.append([r[1], r[2]])
            rhs.append(r[1] * y_map[i])
        sol_yz, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
        cam_y, cam_z = float(sol_yz[0]), float(sol_yz[1])
        if cam_z <= 0:
            return None
    intr = Intrinsics(
        ctx.image_width,
        ctx.image_height,
        Intrinsics.hfov_for_focal(float(sol["focal_px"][0]), ctx.image_width),
    )
    ext = Extrinsics(az_deg, el_deg, float(sol["roll_deg"][0]), np.array([0.0, cam_y, cam_z]))
    return CameraCalibration(intr, ext)


def _solve_reference_pencil(
    observation, v0, intrinsics0, lanes, line_map, y_map, el_grid, az_ref, track
) -> CameraCalibration:
    anchors = [lanes[0], lanes[-1]]
    rest = [i for i in lanes if i not in anchors]
    check = rest[len(rest) // 2]
    ctx = _context_for(
        v0,
        intrinsics0,
        [line_map[anchors[0]], line_map[anchors[1]], line_map[check]],
        [y_map[anchors[0]], y_map[anchors[1]], y_map[check]],
        el_grid,
    )
    members = _solve_members(ctx, np.array([az_ref]))
    if not members["valid"][0]:
        raise NoBracketError(f"reference solve found no member at azimuth {az_ref}")
    el0 = float(members["el_deg"][0])

    def ssd(el_deg: float) -> float:
        cal = _calibration_from_el(ctx, az_ref, el_deg, lanes=lanes, line_map=line_map, y_map=y_map)
        if cal is None:
            return np.inf
        return float(np.sum(lane_fit_residuals(cal, observation, track) ** 2))

    ssd0 = ssd(el0)
    # skip the polish when the three-line solve already fits all raw
    # segments at machine precision (noiseless input)
    if ssd0 > 0.0025 * 2 * len(observation.segments):
        el1 = golden_section(ssd, el0 - 1.5, el0 + 1.5, tol=1e-8)
        if ssd(el1) < ssd0:
            el0 = el1
    cal = _calibration_from_el(ctx, az_ref, el0, lanes=lanes, line_map=line_map, y_map=y_map)
    if cal is None:
        raise NoBracketError(f"reference member at azimuth {az_ref} is not admissible")
    return cal


def _solve_reference_two_lanes(
    v0, intrinsics0, lanes, line_map, y_map, el_grid, az_ref
) -> CameraCalibration:
    """Two observed lanes leave elevation free; pin roll to zero at the
    reference azimuth and solve elevation from the vanishing-point
    direction instead."""
    pp = intrinsics0.principal_point
    dv = v0 - pp
    theta0 = math.atan2(dv[1], dv[0])
    az = math.radians(az_ref)

    def ang_mismatch(el_deg):
        el = np.deg2rad(el_deg)
        ang = np.arctan2(np.tan(el), math.tan(az) / np.cos(el))
        d = ang - theta0
        return np.arctan2(np.sin(d), np.cos(d))

    vals = ang_mismatch(el_grid)
    ok = np.isfinite(vals)
    sign = np.sign(vals)
    cont = np.abs(np.diff(vals)) < 1.0  # skip +-pi wrap cells
    br = np.nonzero(ok[:-1] & ok[1:] & (sign[:-1] * sign[1:] < 0) & cont)[0]
    if br.size == 0:
        raise NoBracketError(
            f"no roll-free elevation matches the vanishing-point direction at azimuth {az_ref}"
        )
    roots = bisect_many(ang_mismatch, el_grid[br], el_grid[br + 1], _EL_TOL_DEG)
    roots = roots[np.isfinite(roots)]
    ctx = _context_for(
        v0,
        intrinsics0,
        [line_map[lanes[0]], line_map[lanes[1]], line_map[lanes[1]]],
        [y_map[lanes[0]], y_map[lanes[1]], y_map[lanes[1]]],
        el_grid,
    )
    best = None
    for el in roots:
        cal = _calibration_from_el(ctx, az_ref, float(el))
        if cal is None:
            continue
        if best is None or abs(cal.extrinsics.roll_deg) < abs(best.extrinsics.roll_deg):
            best = cal
    if best is None:
        raise NoBracketError(f"no admissible two-lane member at azimuth {az_ref}")
    return best


def _solve_reference(
    observation: LaneObservation,
    v0: np.ndarray,
    track: TrackModel,
    intrinsics0: Intrinsics,
    cfg: RunConfig,
) -> CameraCalibration:
    """Statistical per-frame solve at a reference azimuth."""
    pp = intrinsics0.principal_point
    dv = v0 - pp
    if np.hypot(dv[0], dv[1]) < 1e-6:
        raise DegenerateAzimuthError("vanishing point at the principal point")
    side_low = dv[0] > 0
    lanes, line_map, y_map = _raw_pencil(observation, v0, track)
    if len(lanes) < 2:
        raise InsufficientSegmentsError(
            f"need segments on >= 2 distinct lanes, got {len(lanes)}"
        )
    el_grid = np.arange(
        cfg.elevation_range_deg[0], cfg.elevation_range_deg[1] + 1e-9, cfg.elevation_step_deg
    )
    last_err: RegistrationError | None = None
    for az_ref in _reference_candidates(side_low, cfg):
        try:
            if len(lanes) >= 3:
                return _solve_reference_pencil(
                    observation, v0, intrinsics0, lanes, line_map, y_map, el_grid, az_ref, track
                )
            return _solve_reference_two_lanes(
                v0, intrinsics0, lanes, line_map, y_map, el_grid, az_ref
            )
        except RegistrationError as err:
            last_err = err
    raise last_err if last_err is not None else UnusableFrameError("no reference azimuth solvable")


def _virtual_pencil(reference: CameraCalibration, observation: LaneObservation, track: TrackModel):
    """Three exactly-consistent boundary lines from the reference camera.

    All family members are solved against these; by the 3-point
    determinacy of the projective pencil map they then reproduce the
    reference's entire lane pencil.
    """
    lanes = observation.distinct_lanes()
    if len(lanes) >= 3:
        picks = [lanes[0], lanes[-1]]
        rest = [i for i in lanes if i not in picks]
        picks.append(rest[len(rest) // 2])
    else:
        lo, hi = lanes[0], lanes[-1]
        extra = lo - (hi - lo)
        if extra < 0:
            extra = hi + (hi - lo)
        if extra > track.num_lanes:
            extra = lo + max((hi - lo) // 2, 1)  # between the two observed
        picks = [lo, hi, extra]
    vp = vanishing_point_of_direction(reference, _LANE_DIRECTION)
    vph = np.array([vp[0], vp[1], 1.0])
    xs = np.array([60.0, 0.0, -60.0, 150.0, -150.0])
    lines, ys = [], []
    for i in picks:
        pts = np.array([[x, track.boundary_y(i), 0.0] for x in xs])
        uv, depth = project_points(reference, pts)
        front = np.nonzero(depth > 1e-6)[0]
        if front.size == 0:
            raise UnusableFrameError(f"boundary {i} projects behind the reference camera")
        q = uv[front[0]]
        line = np.cross(vph, np.array([q[0], q[1], 1.0]))
        lines.append(line / np.hypot(line[0], line[1]))
        ys.append(track.boundary_y(i))
    return lines, ys


def solve_calibration_at_azimuth(
    v0,
    observation: LaneObservation,
    track: TrackModel,
    intrinsics0: Intrinsics,
    azimuth_deg: float,
    config: RunConfig | None = None,
) -> CameraCalibration:
    """Scene-consistent calibration at one azimuth, from raw segments."""
    cfg = config or RunConfig()
    v0 = np.asarray(v0, dtype=float).reshape(2)
    pp = intrinsics0.principal_point
    dv = v0 - pp
    if np.hypot(dv[0], dv[1]) < 1e-6:
        raise DegenerateAzimuthError(
            "vanishing point at the principal point (azimuth near 0/180)"
        )
    if abs(azimuth_deg - 90.0) <= cfg.azimuth_exclusion_halfwidth_deg:
        raise DegenerateAzimuthError("azimuth too close to 90 deg (vanishing point at infinity)")
    if not 0.5 < azimuth_deg < 179.5:
        raise DegenerateAzimuthError("azimuth too close to 0/180 deg")
    side_low = dv[0] > 0
    if side_low != (azimuth_deg < 90.0):
        raise NoBracketError(
            "requested azimuth lies on the wrong side of 90 deg for this vanishing point"
        )
    lanes, line_map, y_map = _raw_pencil(observation, v0, track)
    if len(lanes) < 2:
        raise InsufficientSegmentsError(f"need segments on >= 2 distinct lanes, got {len(lanes)}")
    el_grid = np.arange(
        cfg.elevation_range_deg[0], cfg.elevation_range_deg[1] + 1e-9, cfg.elevation_step_deg
    )
    if len(lanes) >= 3:
        return _solve_reference_pencil(
            observation, v0, intrinsics0, lanes, line_map, y_map, el_grid, azimuth_deg, track
        )
    return _solve_reference_two_lanes(v0, intrinsics0, lanes, line_map, y_map, el_grid, azimuth_deg)


def anchor_observations(observations: list) -> list:
    """Sequence-consistent lane anchoring: shift every frame's indices by
    one common offset so the typical lowest-in-image segment is lane 0.

    A static camera must see a consistent lane labeling across frames;
    anchoring per frame would shift individual frames by whole lane
    widths whenever clipping changes which segment sits lowest.  The
    shared offset is the modal per-frame choice.
    """
    picks = [o.lowest_in_image_index() for o in observations if o.segments]
    if not picks:
        return list(observations)
    values, counts = np.unique(picks, return_counts=True)
    offset = int(values[np.argmax(counts)])
    return [o.shifted(offset) for o in observations]


def build_family(
    observation: LaneObservation,
    track: TrackModel,
    config: RunConfig,
    image_width: int,
    image_height: int,
) -> CalibrationFamily:
    """Construct the per-frame azimuth family (default 1 deg spacing).

    Lane anchoring (config.lane_indexing) is a sequence-level concern,
    applied by the pipeline via :func:`anchor_observations` before
    families are built; indices are used here as given.
    """
    segments = observation.segments
    if len(segments) < 2:
        raise InsufficientSegmentsError(f"need >= 2 segments, got {len(segments)}")
    v0 = estimate_vanishing_point(segments)
    intrinsics0 = Intrinsics(image_width, image_height, config.hfov0_deg)
    reference = _solve_reference(observation, v0, track, intrinsics0, config)
    lines3, ys3 = _virtual_pencil(reference, observation, track)
    el_grid = np.arange(
        config.elevation_range_deg[0],
        config.elevation_range_deg[1] + 1e-9,
        config.elevation_step_deg,
    )
    ctx = _context_for(v0, intrinsics0, lines3, ys3, el_grid)
    lo, hi = config.azimuth_sweep_deg
    excl = config.azimuth_exclusion_halfwidth_deg
    side_low = (v0 - intrinsics0.principal_point)[0] > 0
    if side_low:
        hi = min(hi, 90.0 - excl)
    else:
        lo = max(lo, 90.0 + excl)
    az_grid = np.arange(lo, hi + 1e-9, config.grid_step_deg)
    if az_grid.size < 2:
        raise UnusableFrameError("azimuth sweep is empty on this side of 90 deg")
    members = _solve_members(ctx, az_grid)
    valid = members["valid"]
    if not np.any(valid):
        raise UnusableFrameError(
            f"frame {observation.frame_id}: no azimuth in the sweep is solvable"
        )
    run_lo, run_hi = _run_containing(valid, az_grid, reference.extrinsics.azimuth_deg)
    z = members["cam_z"][run_lo:run_hi]
    mono_lo, mono_hi = _monotone_run(z, az_grid[run_lo:run_hi], reference.extrinsics.azimuth_deg)
    sel = slice(run_lo + mono_lo, run_lo + mono_hi)
    res = lane_fit_residuals(reference, observation, track)
    return CalibrationFamily(
        frame_id=observation.frame_id,
        v0=v0,
        track=track,
        reference=reference,
        azimuths_deg=az_grid[sel],
        el_deg=members["el_deg"][sel],
        roll_deg=members["roll_deg"][sel],
        focal_px=members["focal_px"][sel],
        cam_y=members["cam_y"][sel],
        cam_z=members["cam_z"][sel],
        context=ctx,
        residual_px_mean=float(np.mean(res)),
        residual_px_max=float(np.max(res)),
    )


def _run_containing(valid: np.ndarray, az_grid: np.ndarray, az_ref: float) -> tuple[int, int]:
    """Bounds of the contiguous valid run nearest the reference azimuth."""
    runs = []
    start = None
    for i, v in enumerate(valid):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, valid.size))

    def dist(run):
        lo, hi = run
        a, b = az_grid[lo], az_grid[hi - 1]
        if a <= az_ref <= b:
            return 0.0
        return min(abs(az_ref - a), abs(az_ref - b))

    return min(runs, key=dist)


def _monotone_run(z: np.ndarray, az: np.ndarray, az_ref: float) -> tuple[int, int]:
    """Largest strictly height-monotone sub-run containing the azimuth
    nearest the reference (frames violating monotonicity get trimmed)."""
    if z.size <= 2:
        return 0, z.size
    sign = np.sign(np.diff(z))
    j = int(np.clip(np.searchsorted(az, az_ref), 1, z.size - 1)) - 1
    s = sign[j] if sign[j] != 0 else 1.0
    lo = j
    while lo > 0 and sign[lo - 1] == s:
        lo -= 1
    hi = j + 1
    while hi < sign.size and sign[hi] == s:
        hi += 1
    return lo, hi + 1


def select_by_height(family: CalibrationFamily, h: float) -> CameraCalibration:
    """Member of the family at the given camera height (|z - h| <= 1e-6 m)."""
    az = family.azimuth_for_height(h, tol_m=1e-7)
    return family.solve_at(az)


# ---------------------------------------------------------------------------
# sequence resolution


class _FamilyBatch:
    """Lockstep member solves across the frames of a sequence."""

    def __init__(self, families: list):
        self.families = families
        self.lines = np.stack([f.context.lines for f in families])      # (nf,3,3)
        self.ys = np.stack([f.context.anchor_ys for f in families])     # (nf,3)
        self.dv = np.stack([f.context.dv for f in families])            # (nf,2)
        pps = {tuple(f.context.pp) for f in families}
        if len(pps) != 1:
            raise NoOverlapError("frames have inconsistent image sizes")
        self.pp = families[0].context.pp

    def solve(self, az_deg: np.ndarray, el_deg: np.ndarray) -> dict:
        return _solve_core(self.lines, self.ys, self.dv, self.pp, az_deg, el_deg)

    def members_at(self, az_deg: np.ndarray) -> dict:
        """Solve each frame's member at its own azimuth (el root inside
        per-frame brackets interpolated from the family grids)."""
        lo = np.empty(az_deg.size)
        hi = np.empty(az_deg.size)
        for i, fam in enumerate(self.families):
            lo[i], hi[i] = fam._el_bracket(float(az_deg[i]))

        def f(el):
            return self.solve(az_deg, el)["residual"]

        roots = bisect_many(f, lo, hi, _EL_TOL_DEG)
        retry = ~np.isfinite(roots)
        if np.any(retry):
            for i in np.nonzero(retry)[0]:
                sol = self.families[i]._solve_scalar(float(az_deg[i]))
                roots[i] = float(sol["el_deg"][0])
        sol = self.solve(az_deg, roots)
        sol["el_deg"] = roots
        return sol

    def azimuths_for_height(self, h: float, tol_m: float = 1e-7) -> np.ndarray:
        """Per-frame azimuth with camera height h (lockstep bisection)."""
        nf = len(self.families)
        lo = np.empty(nf)
        hi = np.empty(nf)
        for i, fam in enumerate(self.families):
            zs = fam.cam_z if fam.height_increasing else fam.cam_z[::-1]
            azs = fam.azimuths_deg if fam.height_increasing else fam.azimuths_deg[::-1]
            j = int(np.clip(np.searchsorted(zs, h), 1, zs.size - 1))
            a, b = sorted((float(azs[j - 1]), float(azs[j])))
            step = float(np.mean(np.diff(fam.azimuths_deg))) if len(fam) > 1 else 1.0
            lo[i] = max(float(fam.azimuths_deg[0]), a - step)
            hi[i] = min(float(fam.azimuths_deg[-1]), b + step)
        f_lo = self.members_at(lo)["cam_z"] - h
        f_hi = self.members_at(hi)["cam_z"] - h
        for _ in range(60):
            if np.max(np.abs(np.minimum(np.abs(f_lo), np.abs(f_hi)))) <= tol_m and np.all(
                (hi - lo) < 1e-9
            ):
                break
            mid = 0.5 * (lo + hi)
            fm = self.members_at(mid)["cam_z"] - h
            done = np.abs(fm) <= tol_m
            go_hi = np.sign(f_lo) != np.sign(fm)
            hi = np.where(done | go_hi, mid, hi)
            f_hi = np.where(done | go_hi, fm, f_hi)
            lo = np.where(done | ~go_hi, mid, lo)
            f_lo = np.where(done | ~go_hi, fm, f_lo)
            if np.all(done):
                break
        return 0.5 * (lo + hi)


@dataclass(eq=False)
class SequenceCalibration:
    """Resolved per-frame calibrations sharing one camera height."""

    frame_ids: list
    calibrations: list
    shared_height: float
    position_std_m: float
    position_spread_m: float
    objective: float

    def by_frame(self) -> dict:
        return dict(zip(self.frame_ids, self.calibrations))


def _interp_objective(families: list):
    """Fast surrogate of the sequence objective: per frame, lateral camera
    position as a monotone-cubic function of height, from the family grid."""
    from scipy.interpolate import PchipInterpolator

    interps = []
    for fam in families:
        z, y = fam.cam_z, fam.cam_y
        if not fam.height_increasing:
            z, y = z[::-1], y[::-1]
        interps.append(PchipInterpolator(z, y, extrapolate=True))

    def objective(h: float) -> float:
        vals = np.array([ip(h) for ip in interps])
        return float(np.var(vals))

    return objective


def solve_sequence(families: list, config: RunConfig | None = None) -> SequenceCalibration:
    """Resolve the shared camera height across frames.

    Minimizes the variance of per-frame camera (y, z) positions over the
    common attainable height range; with every frame selected at the
    same height the z part is identically zero, so the objective reduces
    to the variance of the lateral positions.
    """
    cfg = config or RunConfig()
    families = list(families)
    if not families:
        raise NoOverlapError("no usable frames")
    if len(families) == 1:
        fam = families[0]
        zmin, zmax = fam.height_range
        h = min(max(cfg.prior_height_m, zmin), zmax)
        cal = select_by_height(fam, h)
        return SequenceCalibration([fam.frame_id], [cal], h, 0.0, 0.0, 0.0)
    lo = max(f.height_range[0] for f in families)
    hi = min(f.height_range[1] for f in families)
    if not lo < hi:
        raise NoOverlapError(f"height ranges do not overlap: [{lo:.3f}, {hi:.3f}]")
    surrogate = _interp_objective(families)
    grid = np.linspace(lo, hi, 65)
    vals = [surrogate(float(g)) for g in grid]
    k = int(np.argmin(vals))
    g_lo = float(grid[max(k - 1, 0)])
    g_hi = float(grid[min(k + 1, grid.size - 1)])
    h0 = golden_section(surrogate, g_lo, g_hi, tol=1e-6)

    # densify the surrogate near the optimum with exact member solves and
    # re-minimize, then refit every frame exactly at the final height
    batch = _FamilyBatch(families)
    span = max((hi - lo) / 64.0, 1e-4)
    h_samples = np.clip(np.linspace(h0 - span, h0 + span, 9), lo, hi)
    from scipy.interpolate import PchipInterpolator

    ys_exact = []
    for h in h_samples:
        az = batch.azimuths_for_height(float(h))
        ys_exact.append(batch.members_at(az)["cam_y"])
    ys_exact = np.stack(ys_exact)  # (9, nf)
    uniq, idx = np.unique(h_samples, return_index=True)
    locals_ip = [PchipInterpolator(uniq, ys_exact[idx, i]) for i in range(ys_exact.shape[1])]

    def objective_local(h: float) -> float:
        return float(np.var(np.array([ip(h) for ip in locals_ip])))

    h_star = golden_section(objective_local, float(h_samples[0]), float(h_samples[-1]), tol=1e-6)
    az_star = batch.azimuths_for_height(h_star)
    sol = batch.members_at(az_star)
    cals = []
    for i, fam in enumerate(families):
        cals.append(_member_calibration(fam.context, float(az_star[i]), sol, i))
    y = sol["cam_y"]
    return SequenceCalibration(
        frame_ids=[f.frame_id for f in families],
        calibrations=cals,
        shared_height=h_star,
        position_std_m=float(np.std(y)),
        position_spread_m=float(np.ptp(y)),
        objective=float(np.var(y)),
    )
