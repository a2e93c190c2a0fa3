"""Lift 2D skeletons into absolute 3D world coordinates.

Pipeline per sequence: detect ground contacts by ray-casting ankles onto
the track plane, interpolate the athlete's lateral position between
contacts into a sagittal plane per frame, cast the pelvis ray into that
plane, then build the kinematic chain outward by intersecting each
joint's pixel ray with a limb-length sphere around its parent.  Each
three-edge limb (leg = hip/knee/ankle, arm = shoulder/elbow/wrist) has
up to eight sphere-branch configurations; range-of-motion pruning and
frame-to-frame consistency select the survivor.  Torso joints are placed
edge by edge with the same mechanism.

Every lifted joint lies on its own pixel ray by construction (except
flagged sphere-miss fallbacks, which sit on the sphere nearest the ray),
so re-projection reproduces the input 2D joints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import (
    CameraCalibration,
    DistortionModel,
    GROUND_PLANE,
    Plane,
    intersect_ray_plane,
    pixel_ray,
    undistort_pixels,
)
from .registration import CalibrationFamily, SequenceCalibration, _FamilyBatch, _member_calibration
from .optimize import golden_section
from .skeleton import (
    JOINT_INDEX,
    JOINTS,
    LIMB_SEGMENTS,
    LimbLengths,
    PARENT,
    Skeleton2D,
    Skeleton3D,
    TORSO_CHAIN,
)


class LiftingError(Exception):
    """Base class for lifting failures."""


# branch-selection weights: scene anchors (sagittal plane, stance contact)
# dominate; pelvis-relative temporal consistency breaks near-tangency ties
# where the scene terms cannot separate the coincident branches
_W_PLANE = 8.0
_W_CONTACT = 32.0


class NoContactsError(LiftingError):
    """No ground-contact window qualifies."""


class NoCycleError(LiftingError):
    """No reliable gait cycle in the 2D sequence."""


@dataclass(eq=False)
class ContactEvent:
    side: str
    start_frame: int
    end_frame: int  # inclusive
    frame: int      # window median frame
    position: np.ndarray  # ground point, z = 0 exactly


@dataclass(eq=False)
class ContactTimeline:
    states: list          # per-frame "none" | "left" | "right" | "both"
    events: list          # ContactEvent, ordered by frame
    ground_tracks: dict   # side -> (n, 3) ankle ground casts (NaN where invalid)


@dataclass(eq=False)
class SagittalTrack:
    """Per-frame vertical plane {y = offset(t)} with normal (0, 1, 0)."""

    offsets: np.ndarray
    from_prior: bool = False

    def plane_at(self, frame: int) -> Plane:
        return Plane(np.array([0.0, 1.0, 0.0]), float(self.offsets[frame]))


def _ground_cast(cal: CameraCalibration, px: np.ndarray) -> np.ndarray | None:
    ray = pixel_ray(cal, px)
    dz = ray.direction[2]
    if abs(dz) <= 1e-12:
        return None
    t = -ray.origin[2] / dz
    if t <= 0:
        return None
    return ray.at(t)


def detect_contacts(
    seq2d: list,
    calibrations: list,
    fps: float,
    config: RunConfig | None = None,
) -> ContactTimeline:
    """Per-frame foot contact states from ankle ground-speed windows.

    An ankle is in contact over maximal windows where its ground-projected
    speed stays below the threshold for at least the minimum number of
    frames; the event position is the componentwise median ground point.
    """
    cfg = config or RunConfig()
    n = len(seq2d)
    tracks = {}
    for side in ("left", "right"):
        pts = np.full((n, 3), np.nan)
        joint = f"{side}_ankle"
        for i, (sk, cal) in enumerate(zip(seq2d, calibrations)):
            if cal is None or sk.conf(joint) < cfg.confidence_threshold:
                continue
            g = _ground_cast(cal, sk.point(joint))
            if g is not None:
                pts[i] = g
        tracks[side] = pts
    events = []
    states = ["none"] * n
    for side in ("left", "right"):
        pts = tracks[side]
        speed = np.full(n, np.inf)
        ok = np.all(np.isfinite(pts), axis=1)
        for i in range(n):
            if not ok[i]:
                continue
            if 0 < i < n - 1 and ok[i - 1] and ok[i + 1]:
                speed[i] = np.linalg.norm(pts[i + 1] - pts[i - 1]) * fps / 2.0
            elif i + 1 < n and ok[i + 1]:
                speed[i] = np.linalg.norm(pts[i + 1] - pts[i]) * fps
            elif i > 0 and ok[i - 1]:
                speed[i] = np.linalg.norm(pts[i] - pts[i - 1]) * fps
        slow = speed < cfg.contact_speed_threshold_mps
        i = 0
        while i < n:
            if not slow[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and slow[j + 1]:
                j += 1
            if j - i + 1 >= cfg.contact_min_frames:
                window = pts[i : j + 1]
                pos = np.median(window, axis=0)
                pos[2] = 0.0
                events.append(
                    ContactEvent(side, i, j, (i + j) // 2, pos)
                )
                for k in range(i, j + 1):
                    states[k] = side if states[k] == "none" else "both"
            i = j + 1
    if not events:
        raise NoContactsError("no contact window qualifies")
    events.sort(key=lambda e: (e.frame, e.side))
    return ContactTimeline(states, events, tracks)


def derive_sagittal_track(
    contacts: ContactTimeline | None,
    n_frames: int,
    config: RunConfig | None = None,
) -> SagittalTrack:
    """Lateral offset per frame, linear between contact events and flat
    beyond the first/last; prior-plane fallback with < 2 events."""
    cfg = config or RunConfig()
    if contacts is None or len(contacts.events) < 2:
        return SagittalTrack(np.full(n_frames, cfg.prior_plane_y_m), from_prior=True)
    frames = np.array([e.frame for e in contacts.events], dtype=float)
    ys = np.array([e.position[1] for e in contacts.events])
    offsets = np.interp(np.arange(n_frames, dtype=float), frames, ys)
    return SagittalTrack(offsets)


def cast_pelvis(sk2d: Skeleton2D, cal: CameraCalibration, plane: Plane) -> np.ndarray:
    """Pelvis pixel ray intersected with the sagittal plane."""
    if sk2d.conf("pelvis") <= 0:
        raise LiftingError("pelvis not detected")
    return intersect_ray_plane(pixel_ray(cal, sk2d.point("pelvis")), plane)


# ---------------------------------------------------------------------------
# kinematic chain construction


def _joint_candidates(origin, rot_wc, f, pp, px, parent, radius):
    """Forward ray-sphere intersections for one joint.

    Returns (points, fallback): up to two points sorted by ray parameter,
    or the nearest sphere-surface point with fallback=True on a miss.
    """
    nx = (px[0] - pp[0]) / f
    ny = (px[1] - pp[1]) / f
    d = rot_wc @ np.array([nx, ny, 1.0])
    d /= math.sqrt(d @ d)
    oc = parent - origin
    m = float(d @ oc)
    q = float(oc @ oc) - radius * radius
    disc = m * m - q
    if disc > 0.0:
        s = math.sqrt(disc)
        ts = [t for t in (m - s, m + s) if t > 0.0]
        if ts:
            pts = [origin + t * d for t in ts]
            if len(pts) == 2 and s < 1e-9 * (1.0 + radius):
                pts = pts[:1]  # coincident branches at tangency
            return pts, False
    elif disc == 0.0 and m > 0.0:
        return [origin + m * d], False
    # miss: nearest point on the sphere to the ray line
    t_foot = m
    foot = origin + t_foot * d
    v = foot - parent
    nv = math.sqrt(float(v @ v))
    if nv < 1e-12:
        return [parent + radius * np.array([0.0, 0.0, 1.0])], True
    return [parent + (radius / nv) * v], True


def _interior_angle(a, b, c) -> float:
    """Interior angle at b between segments b-a and b-c, degrees."""
    u = a - b
    v = c - b
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu < 1e-12 or nv < 1e-12:
        raise LiftingError("degenerate limb for interior angle")
    cosang = max(-1.0, min(1.0, float(u @ v) / (nu * nv)))
    return math.degrees(math.acos(cosang))


def _enumerate_segment(origin, rot_wc, f, pp, sk2d, lengths, root_name, root_pos, chain):
    """All branch configurations of a three-edge limb segment.

    Returns a list of (positions dict, fallback joint set)."""
    configs = [({}, set())]
    parent_name = root_name
    parent_of = {}
    prev = root_name
    for j in chain:
        parent_of[j] = prev
        prev = j
    for j in chain:
        radius = lengths.of(parent_of[j], j)
        new_configs = []
        for placed, fb in configs:
            parent_pos = placed.get(parent_of[j], root_pos)
            pts, fallback = _joint_candidates(
                origin, rot_wc, f, pp, sk2d.point(j), parent_pos, radius
            )
            for p in pts:
                placed2 = dict(placed)
                placed2[j] = p
                fb2 = set(fb)
                if fallback:
                    fb2.add(j)
                new_configs.append((placed2, fb2))
        configs = new_configs
    return configs


def _rom_ok(placed, chain, root_pos, rom_min, rom_max) -> bool:
    """Range-of-motion check on the middle joint (knee / elbow)."""
    a = root_pos if chain[0] not in placed else placed[chain[0]]
    mid, end = placed[chain[1]], placed[chain[2]]
    ang = _interior_angle(a, mid, end)
    return rom_min <= ang <= rom_max


@dataclass(eq=False)
class FrameFlags:
    fallback_joints: tuple = ()
    all_pruned_segments: tuple = ()
    error: str | None = None


def build_chain(
    sk2d: Skeleton2D,
    cal: CameraCalibration,
    pelvis: np.ndarray,
    lengths: LimbLengths,
    prev: Skeleton3D | None = None,
    prior: Skeleton3D | None = None,
    config: RunConfig | None = None,
    run_dir: float = 1.0,
    plane_y: float | None = None,
    contact_anchors: dict | None = None,
) -> tuple[Skeleton3D, FrameFlags]:
    """Place all joints from the pelvis outward.

    Selection per limb segment: exhaustive enumeration of the (at most
    eight) sphere-branch configurations, range-of-motion pruning at knee
    and elbow, then the survivor minimizing pelvis-relative squared
    distance to the same joints in ``prev`` (or ``prior`` if no previous
    frame), plus two scene anchors that keep the tracker off the
    depth-mirrored twin: proximity to the sagittal plane and, during a
    detected stance, proximity of the ankle to its ground-contact point.
    Without any reference a static heuristic resolves the frame: knee
    displaced opposite to, elbow along, the running direction, with
    sagittal-plane proximity as the tie-break.

    ``contact_anchors`` maps "left"/"right" to the ground-contact world
    point when that foot is in a detected contact window this frame.
    """
    cfg = config or RunConfig()
    ext = cal.extrinsics
    from .geometry import rotation_world_from_camera

    rot_wc = rotation_world_from_camera(ext.azimuth_deg, ext.elevation_deg, ext.roll_deg)
    f = cal.intrinsics.focal_px
    pp = cal.intrinsics.principal_point
    origin = cal.camera_center
    positions = {"pelvis": np.asarray(pelvis, dtype=float)}
    fallbacks: list[str] = []
    pruned_segments: list[str] = []

    # consistency is judged on pelvis-relative pose: the athlete moves
    # several centimeters per frame, which would otherwise dominate the
    # branch separation of small-radius edges (and the external prior
    # lives in its own frame anyway, the along-track position being
    # unobservable)
    ref_skel = prev if prev is not None else prior
    ref_shift = None
    if ref_skel is not None:
        ref_shift = positions["pelvis"] - ref_skel.point("pelvis")

    def ref_point(j):
        if ref_skel is None:
            return None
        return ref_skel.point(j) + ref_shift

    # torso, edge by edge
    for j in TORSO_CHAIN:
        parent = PARENT[j]
        pts, fb = _joint_candidates(
            origin, rot_wc, f, pp, sk2d.point(j), positions[parent], lengths.of(parent, j)
        )
        ref = ref_point(j)
        if ref is not None:
            def score(p, r=ref):
                val = float((p - r) @ (p - r))
                if plane_y is not None:
                    val += _W_PLANE * (p[1] - plane_y) ** 2
                return val
            best = min(pts, key=score)
        else:
            best = max(pts, key=lambda p: p[2])  # upright prior
        positions[j] = best
        if fb:
            fallbacks.append(j)

    # limbs: exhaustive 8-way enumeration per three-edge segment
    for seg_name, chain in LIMB_SEGMENTS.items():
        root_name = PARENT[chain[0]]
        root_pos = positions[root_name]
        configs = _enumerate_segment(
            origin, rot_wc, f, pp, sk2d, lengths, root_name, root_pos, chain
        )
        surviving = [
            c for c in configs if _rom_ok(c[0], chain, root_pos, cfg.rom_min_deg, cfg.rom_max_deg)
        ]
        if not surviving:
            pruned_segments.append(seg_name)
            surviving = configs  # smoothness-only fallback
        refs = {j: ref_point(j) for j in chain}
        is_leg = "leg" in seg_name
        anchor = None
        if is_leg and contact_anchors is not None:
            anchor = contact_anchors.get(seg_name.split("_")[0])

        def scene_terms(placed) -> float:
            val = 0.0
            if plane_y is not None:
                for j in chain:
                    dy = placed[j][1] - plane_y
                    val += _W_PLANE * dy * dy
            if anchor is not None:
                da = placed[chain[2]] - anchor
                val += _W_CONTACT * float(da @ da)
            return val

        if all(r is not None for r in refs.values()):
            def objective(c):
                placed, _ = c
                temporal = sum(
                    float((placed[j] - refs[j]) @ (placed[j] - refs[j])) for j in chain
                )
                return temporal + scene_terms(placed)
        else:
            mid = chain[1]

            def objective(c):
                placed, _ = c
                primary = run_dir * placed[mid][0] if is_leg else -run_dir * placed[mid][0]
                return (primary, scene_terms(placed))

        best_placed, best_fb = min(surviving, key=objective)
        positions.update(best_placed)
        fallbacks.extend(sorted(best_fb))

    pts = np.stack([positions[j] for j in JOINTS])
    flags = FrameFlags(tuple(fallbacks), tuple(pruned_segments))
    return Skeleton3D(sk2d.frame_id, pts), flags


@dataclass(eq=False)
class LiftReport:
    contacts: ContactTimeline | None
    sagittal: SagittalTrack
    frame_flags: list
    run_dir: float
    period_frames: float | None = None
    refined_height: float | None = None

    @property
    def n_failed(self) -> int:
        return sum(1 for fl in self.frame_flags if fl.error is not None)


def _undistorted(seq2d: list, config: RunConfig, width: int, height: int) -> list:
    if config.distortion is None:
        return seq2d
    model = DistortionModel(*config.distortion)
    out = []
    for sk in seq2d:
        pts = undistort_pixels(model, sk.points, width, height)
        out.append(Skeleton2D(sk.frame_id, pts, sk.confidence.copy()))
    return out


def _run_direction(contacts: ContactTimeline | None) -> float:
    if contacts is None or len(contacts.events) < 2:
        return 1.0
    dx = contacts.events[-1].position[0] - contacts.events[0].position[0]
    return 1.0 if dx >= 0 else -1.0


def lift_sequence(
    seq2d: list,
    seqcal: SequenceCalibration,
    lengths: LimbLengths,
    config: RunConfig | None = None,
    fps: float = 50.0,
    prior_skeletons: dict | None = None,
) -> tuple[list, LiftReport]:
    """Lift every frame; per-frame failures are reported, not fatal.

    ``prior_skeletons`` maps frame_id to an external 3D estimate used for
    first-frame branch disambiguation (and anywhere the previous frame is
    unavailable).  Deterministic for identical inputs.
    """
    cfg = config or RunConfig()
    cal_by_frame = seqcal.by_frame()
    cals = [cal_by_frame.get(sk.frame_id) for sk in seq2d]
    n = len(seq2d)
    if n == 0:
        return [], LiftReport(None, SagittalTrack(np.empty(0)), [], 1.0)
    width = next(iter(c for c in cals if c is not None)).intrinsics.image_width
    height = next(iter(c for c in cals if c is not None)).intrinsics.image_height
    seq2d = _undistorted(seq2d, cfg, width, height)
    try:
        contacts = detect_contacts(seq2d, cals, fps, cfg)
    except NoContactsError:
        contacts = None
    sagittal = derive_sagittal_track(contacts, n, cfg)
    run_dir = _run_direction(contacts)
    anchors_by_frame: list = [dict() for _ in range(n)]
    if contacts is not None:
        for ev in contacts.events:
            for k in range(ev.start_frame, ev.end_frame + 1):
                anchors_by_frame[k][ev.side] = ev.position
    skeletons: list = []
    flags: list = []
    prev: Skeleton3D | None = None
    for i, sk in enumerate(seq2d):
        cal = cals[i]
        if cal is None:
            skeletons.append(None)
            flags.append(FrameFlags(error="no calibration"))
            continue
        plane = sagittal.plane_at(i)
        prior = prior_skeletons.get(sk.frame_id) if prior_skeletons else None
        try:
            pelvis = cast_pelvis(sk, cal, plane)
            skel, fl = build_chain(
                sk, cal, pelvis, lengths,
                prev=prev, prior=prior, config=cfg,
                run_dir=run_dir, plane_y=float(plane.offset),
                contact_anchors=anchors_by_frame[i],
            )
        except Exception as exc:  # per-frame failure, collected
            skeletons.append(None)
            flags.append(FrameFlags(error=str(exc)))
            continue
        skeletons.append(skel)
        flags.append(fl)
        prev = skel
    return skeletons, LiftReport(contacts, sagittal, flags, run_dir)


def reorient_external(sk_cam: Skeleton3D, cal: CameraCalibration) -> Skeleton3D:
    """Express a camera-frame skeleton in world axes: inverse camera
    rotation plus the camera-center translation."""
    R = cal.extrinsics.R
    pts = sk_cam.points @ R + cal.camera_center  # p^T R == (R^T p)^T
    return Skeleton3D(sk_cam.frame_id, pts)


# ---------------------------------------------------------------------------
# cycle-context refinement


def estimate_cycle_period(
    seq2d: list, config: RunConfig | None = None, joint: str = "left_ankle"
) -> float:
    """Stride period in frames from the autocorrelation of the detrended
    vertical pixel trace of one ankle, refined by parabolic interpolation."""
    from scipy.signal import find_peaks

    cfg = config or RunConfig()
    v = np.array([sk.point(joint)[1] for sk in seq2d], dtype=float)
    n = v.size
    if n < 12:
        raise NoCycleError("sequence too short for cycle estimation")
    t = np.arange(n, dtype=float)
    coef = np.polyfit(t, v, 1)
    x = v - np.polyval(coef, t)
    denom = float(x @ x)
    if denom < 1e-12:
        raise NoCycleError("vertical ankle trace is constant")
    full = np.correlate(x, x, mode="full")[n - 1 :]
    counts = np.arange(n, 0, -1, dtype=float)
    rho = (full / counts) / (full[0] / counts[0])
    max_lag = n // 3
    peaks, props = find_peaks(rho[: max_lag + 1], prominence=cfg.cycle_min_prominence)
    peaks = peaks[peaks >= 3]
    if peaks.size == 0:
        raise NoCycleError("no autocorrelation peak with sufficient prominence")
    k = int(peaks[np.argmax(rho[peaks])])
    if 1 <= k < max_lag:
        den = rho[k - 1] - 2.0 * rho[k] + rho[k + 1]
        if abs(den) > 1e-12:
            k = k + 0.5 * (rho[k - 1] - rho[k + 1]) / den
    return float(k)


def _phase_self_similarity(skeletons: list, period: float, phase_bins: int) -> float:
    """Mean pairwise pelvis-aligned joint distance between frames falling
    in the same cycle-phase bin."""
    pel = JOINT_INDEX["pelvis"]
    frames = [i for i, s in enumerate(skeletons) if s is not None]
    if len(frames) < 2:
        return math.inf
    pts = np.stack([skeletons[i].points for i in frames])
    centered = pts - pts[:, pel : pel + 1, :]
    phase = (np.array(frames, dtype=float) / period) % 1.0
    bins = np.minimum((phase * phase_bins).astype(int), phase_bins - 1)
    total, count = 0.0, 0
    for b in range(phase_bins):
        idx = np.nonzero(bins == b)[0]
        if idx.size < 2:
            continue
        x = centered[idx]
        diff = x[:, None, :, :] - x[None, :, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1)).mean(axis=-1)
        iu = np.triu_indices(idx.size, k=1)
        total += float(d[iu].sum())
        count += iu[0].size
    if count == 0:
        return math.inf
    return total / count


def refine_with_cycle_context(
    seq2d: list,
    families: list,
    lengths: LimbLengths,
    config: RunConfig | None = None,
    fps: float = 50.0,
    initial_height: float | None = None,
    prior_skeletons: dict | None = None,
) -> tuple[SequenceCalibration, list, LiftReport]:
    """Re-resolve the shared camera height by minimizing self-similarity
    across equal gait-cycle phases, then relift.

    The cycle period comes from 2D alone.  The height search is local: a
    scan plus golden-section inside ``initial_height +- refine window``
    (the static-position solve provides the initial height when none is
    given).  Far from the truth the dissimilarity landscape flattens out
    because sphere-miss fallbacks clamp the poses, so a global search
    could settle on that shelf; near the initial solution the true basin
    is sharp.
    """
    cfg = config or RunConfig()
    period = estimate_cycle_period(seq2d, cfg)
    if len(seq2d) < 3 * period:
        raise NoCycleError(
            f"need >= 3 cycles, have {len(seq2d) / period:.2f}"
        )
    families = list(families)
    batch = _FamilyBatch(families)
    lo = max(f.height_range[0] for f in families)
    hi = min(f.height_range[1] for f in families)
    if initial_height is None:
        from .registration import solve_sequence

        initial_height = solve_sequence(families, cfg).shared_height
    window = 0.75
    lo = max(lo, initial_height - window)
    hi = min(hi, initial_height + window)

    def seqcal_at(h: float) -> SequenceCalibration:
        az = batch.azimuths_for_height(float(h))
        sol = batch.members_at(az)
        cals = [
            _member_calibration(fam.context, float(az[i]), sol, i)
            for i, fam in enumerate(families)
        ]
        y = sol["cam_y"]
        return SequenceCalibration(
            [f.frame_id for f in families], cals, float(h),
            float(np.std(y)), float(np.ptp(y)), float(np.var(y)),
        )

    cache: dict = {}

    def objective(h: float) -> float:
        key = round(h, 7)
        if key in cache:
            return cache[key]
        sc = seqcal_at(h)
        skels, _ = lift_sequence(seq2d, sc, lengths, cfg, fps, prior_skeletons)
        val = _phase_self_similarity(skels, period, cfg.phase_bins)
        cache[key] = val
        return val

    grid = np.linspace(lo, hi, 17)
    vals = [objective(float(g)) for g in grid]
    k = int(np.argmin(vals))
    g_lo = float(grid[max(k - 1, 0)])
    g_hi = float(grid[min(k + 1, grid.size - 1)])
    h_star = golden_section(objective, g_lo, g_hi, tol=cfg.refine_height_tol_m)
    if objective(float(grid[k])) < objective(h_star):
        h_star = float(grid[k])
    seqcal = seqcal_at(h_star)
    skels, report = lift_sequence(seq2d, seqcal, lengths, cfg, fps, prior_skeletons)
    report.period_frames = period
    report.refined_height = h_star
    return seqcal, skels, report
