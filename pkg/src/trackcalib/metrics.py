"""Evaluation measures: re-projection, 3D error, knee angle, calibration.

Pose metrics follow the pelvis-matched protocol: the estimated skeleton
is translated so its pelvis coincides with the ground truth pelvis
before projecting or differencing.  Aggregation reports mean (std) where
the std is taken over per-sequence means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraCalibration,
    DistortionModel,
    distort_pixels,
    project_points,
    vanishing_point_of_direction,
)
from .registration import TrackModel
from .skeleton import JOINT_INDEX, JOINTS, Skeleton2D, Skeleton3D


class MetricError(Exception):
    pass


class DegenerateLimbError(MetricError):
    """Zero-length limb vector; the angle is undefined."""


def _pelvis_matched(est: Skeleton3D, truth: Skeleton3D) -> np.ndarray:
    pel = JOINT_INDEX["pelvis"]
    return est.points - est.points[pel] + truth.points[pel]


def reprojection_error(
    est3d: Skeleton3D,
    det2d: Skeleton2D,
    truth3d: Skeleton3D,
    truth_cal: CameraCalibration,
    distortion: DistortionModel | None = None,
) -> float:
    """Mean pixel distance between the pelvis-matched estimate's
    projection (through the ground-truth calibration) and the detected
    2D joints.  Joints behind the camera are excluded."""
    pts = _pelvis_matched(est3d, truth3d)
    uv, depth = project_points(truth_cal, pts)
    if distortion is not None:
        uv = distort_pixels(
            distortion, uv, truth_cal.intrinsics.image_width, truth_cal.intrinsics.image_height
        )
    ok = (depth > 0) & (det2d.confidence > 0)
    if not np.any(ok):
        raise MetricError("no joint visible in both estimate and detection")
    d = np.linalg.norm(uv[ok] - det2d.points[ok], axis=1)
    return float(d.mean())


def error_3d(est3d: Skeleton3D, truth3d: Skeleton3D) -> float:
    """Mean per-joint Euclidean distance in centimeters, pelvis-matched."""
    pts = _pelvis_matched(est3d, truth3d)
    return float(np.linalg.norm(pts - truth3d.points, axis=1).mean() * 100.0)


def knee_angle(sk: Skeleton3D, side: str) -> float:
    """Interior angle at the knee between thigh and shank, degrees."""
    hip = sk.point(f"{side}_hip")
    knee = sk.point(f"{side}_knee")
    ankle = sk.point(f"{side}_ankle")
    u = hip - knee
    v = ankle - knee
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateLimbError(f"{side} knee has a zero-length limb")
    c = float(u @ v) / (nu * nv)
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def knee_angle_error(est3d: Skeleton3D, truth3d: Skeleton3D) -> float:
    """Mean absolute knee-angle difference over both sides, degrees."""
    errs = [
        abs(knee_angle(est3d, side) - knee_angle(truth3d, side))
        for side in ("left", "right")
    ]
    return float(np.mean(errs))


@dataclass(eq=False)
class CalibMetrics:
    """Calibration error relative to ground truth.

    The along-track (x) camera coordinate is unconstrainable from
    co-linear lanes, so the headline location error excludes it; the
    full 3D distance is reported separately.
    """

    camera_location_m: float
    camera_location_with_x_m: float
    camera_location_pct_of_distance: float
    fov_deg: float
    vanishing_point_pct: float


def calib_error(
    est: CameraCalibration, truth: CameraCalibration, track: TrackModel
) -> CalibMetrics:
    dc = est.camera_center - truth.camera_center
    loc = float(np.hypot(dc[1], dc[2]))
    loc_x = float(np.linalg.norm(dc))
    c = truth.camera_center
    dists = [
        math.hypot(c[1] - y, c[2]) for y in track.boundary_ys
    ]
    cam_dist = min(dists)
    fov = abs(est.intrinsics.hfov_deg - truth.intrinsics.hfov_deg)
    d = np.array([1.0, 0.0, 0.0])
    vp_est = vanishing_point_of_direction(est, d)
    vp_true = vanishing_point_of_direction(truth, d)
    diag = math.hypot(truth.intrinsics.image_width, truth.intrinsics.image_height)
    return CalibMetrics(
        camera_location_m=loc,
        camera_location_with_x_m=loc_x,
        camera_location_pct_of_distance=100.0 * loc / cam_dist,
        fov_deg=fov,
        vanishing_point_pct=100.0 * float(np.linalg.norm(vp_est - vp_true)) / diag,
    )


@dataclass(eq=False)
class SequenceMetrics:
    """Per-sequence pose metric means plus per-frame breakdowns."""

    name: str
    reprojection_px: float
    error_3d_cm: float
    knee_angle_deg: float
    per_frame: dict = field(default_factory=dict)
    calib: CalibMetrics | None = None
    n_frames: int = 0


def evaluate_sequence(
    name: str,
    est3d: list,
    det2d: list,
    truth3d: list,
    truth_cals: list,
    track: TrackModel,
    est_cals: list | None = None,
    distortion: DistortionModel | None = None,
) -> SequenceMetrics:
    """Frame-aligned evaluation of one sequence; skips frames whose
    estimate is missing."""
    rp, e3, ka = [], [], []
    frames = []
    for est, det, tr, cal in zip(est3d, det2d, truth3d, truth_cals):
        if est is None:
            continue
        frames.append(det.frame_id)
        rp.append(reprojection_error(est, det, tr, cal, distortion))
        e3.append(error_3d(est, tr))
        ka.append(knee_angle_error(est, tr))
    if not frames:
        raise MetricError(f"sequence {name}: no evaluable frames")
    calib = None
    if est_cals is not None:
        per = [
            calib_error(e, t, track)
            for e, t in zip(est_cals, truth_cals)
            if e is not None
        ]
        calib = CalibMetrics(
            camera_location_m=float(np.mean([c.camera_location_m for c in per])),
            camera_location_with_x_m=float(np.mean([c.camera_location_with_x_m for c in per])),
            camera_location_pct_of_distance=float(
                np.mean([c.camera_location_pct_of_distance for c in per])
            ),
            fov_deg=float(np.mean([c.fov_deg for c in per])),
            vanishing_point_pct=float(np.mean([c.vanishing_point_pct for c in per])),
        )
    return SequenceMetrics(
        name=name,
        reprojection_px=float(np.mean(rp)),
        error_3d_cm=float(np.mean(e3)),
        knee_angle_deg=float(np.mean(ka)),
        per_frame={
            "frame": frames,
            "reprojection_px": rp,
            "error_3d_cm": e3,
            "knee_angle_deg": ka,
        },
        calib=calib,
        n_frames=len(frames),
    )


@dataclass(eq=False)
class PoseMetrics:
    """Mean (std) over per-sequence means, Table-style."""

    reprojection_px: tuple
    error_3d_cm: tuple
    knee_angle_deg: tuple
    n_sequences: int


def aggregate(sequences: list) -> PoseMetrics:
    def stat(vals):
        arr = np.asarray(vals, dtype=float)
        return (float(arr.mean()), float(arr.std()))

    return PoseMetrics(
        reprojection_px=stat([s.reprojection_px for s in sequences]),
        error_3d_cm=stat([s.error_3d_cm for s in sequences]),
        knee_angle_deg=stat([s.knee_angle_deg for s in sequences]),
        n_sequences=len(sequences),
    )


def format_report(pose: PoseMetrics, sequences: list) -> str:
    """Fixed-layout text report: one row per sequence plus the aggregate
    mean (std) line."""
    lines = []
    lines.append(f"{'Sequence':24s} {'Re-projection':>16s} {'3D Error':>14s} {'Knee angle':>14s}")
    lines.append(f"{'':24s} {'[pixel]':>16s} {'[cm]':>14s} {'[degree]':>14s}")
    lines.append("-" * 72)
    for s in sequences:
        lines.append(
            f"{s.name:24s} {s.reprojection_px:16.4f} {s.error_3d_cm:14.4f} {s.knee_angle_deg:14.4f}"
        )
    lines.append("-" * 72)
    lines.append(
        f"{'mean (std)':24s} "
        f"{pose.reprojection_px[0]:9.4f} ({pose.reprojection_px[1]:.4f}) "
        f"{pose.error_3d_cm[0]:7.4f} ({pose.error_3d_cm[1]:.4f}) "
        f"{pose.knee_angle_deg[0]:7.4f} ({pose.knee_angle_deg[1]:.4f})"
    )
    calibs = [s.calib for s in sequences if s.calib is not None]
    if calibs:
        lines.append("")
        lines.append("Calibration error (mean over frames, then sequences):")
        loc = np.mean([c.camera_location_m for c in calibs])
        locx = np.mean([c.camera_location_with_x_m for c in calibs])
        pct = np.mean([c.camera_location_pct_of_distance for c in calibs])
        fov = np.mean([c.fov_deg for c in calibs])
        vp = np.mean([c.vanishing_point_pct for c in calibs])
        lines.append(f"  camera location (y,z)   {loc:12.6f} m   ({pct:.4f}% of lane distance)")
        lines.append(f"  camera location (x,y,z) {locx:12.6f} m")
        lines.append(f"  field of view           {fov:12.6f} deg")
        lines.append(f"  vanishing point         {vp:12.6f} % of image diagonal")
    return "\n".join(lines) + "\n"
