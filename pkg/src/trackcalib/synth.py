"""Synthetic straight-track running scenes with exact ground truth.

A parametric, exactly periodic analytic gait replaces rendered data: the
pelvis advances at constant speed with sinusoidal bob, stance feet are
pinned to the ground and resolved by two-link inverse kinematics, swing
legs follow raised-cosine hip/knee angle profiles between the stance
boundary configurations, arms swing antiphase to the legs.  All limb
lengths equal the configured values exactly and
``pose(t + stride_period)`` equals ``pose(t)`` shifted by one stride.

A scene adds a static-position pan/tilt/zoom camera, exact 2D
projections, exact lane segments clipped to the image, and optional
Gaussian pixel noise and radial lens distortion on the emitted
observations (ground truth stays pinhole + model).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    CameraCalibration,
    DistortionModel,
    Extrinsics,
    Intrinsics,
    distort_pixels,
    project_points,
)
from .registration import LaneObservation, LaneSegment, TrackModel
from .skeleton import EDGES, JOINT_INDEX, JOINTS, LimbLengths, Skeleton2D, Skeleton3D


class UnreachableError(Exception):
    """Stance inverse kinematics infeasible (pelvis too high for the leg)."""


DEFAULT_LIMB_LENGTHS = LimbLengths.from_dict({
    "pelvis->spine": 0.12,
    "spine->thorax": 0.16,
    "thorax->neck": 0.14,
    "neck->head": 0.12,
    "neck->left_shoulder": 0.16,
    "left_shoulder->left_elbow": 0.30,
    "left_elbow->left_wrist": 0.26,
    "neck->right_shoulder": 0.16,
    "right_shoulder->right_elbow": 0.30,
    "right_elbow->right_wrist": 0.26,
    "pelvis->left_hip": 0.10,
    "left_hip->left_knee": 0.42,
    "left_knee->left_ankle": 0.44,
    "pelvis->right_hip": 0.10,
    "right_hip->right_knee": 0.42,
    "right_knee->right_ankle": 0.44,
})


@dataclass(eq=False)
class GaitConfig:
    """Parametric running motion; step length is speed / cadence."""

    speed: float = 4.0              # m/s along +x
    cadence: float = 3.0            # steps per second
    limb_lengths: LimbLengths = field(default_factory=lambda: DEFAULT_LIMB_LENGTHS)
    pelvis_height_mean: float = 0.80
    pelvis_height_amplitude: float = 0.035
    stance_width: float = 0.12      # lateral separation of hips/ankles/shoulders
    duty_factor: float = 0.30       # stance fraction of the stride cycle
    body_lean_deg: float = 6.0
    left_leg_phase: float = 0.0     # stride-cycle phase offsets per limb
    right_leg_phase: float = 0.5
    swing_knee_lift_deg: float = 60.0
    arm_swing_deg: float = 25.0
    elbow_flexion_deg: float = 75.0
    path_y: float = 5.49            # lateral running line (middle of lane 5)
    start_x: float = 0.0

    def __post_init__(self):
        if self.speed <= 0 or self.cadence <= 0:
            raise ValueError("speed and cadence must be positive")
        if not 0.0 < self.duty_factor < 1.0:
            raise ValueError("duty_factor must be in (0, 1)")
        hw = self.stance_width / 2.0
        for parent, child in (("pelvis", "left_hip"), ("neck", "left_shoulder")):
            if self.limb_lengths.of(parent, child) <= hw:
                raise ValueError(
                    f"{parent}->{child} length must exceed stance_width/2"
                )

    @property
    def stride_period(self) -> float:
        return 2.0 / self.cadence

    @property
    def stride_length(self) -> float:
        return self.speed * self.stride_period

    @property
    def step_length(self) -> float:
        return self.speed / self.cadence


@dataclass(eq=False)
class GaitFrame:
    skeleton: Skeleton3D
    left_contact: bool
    right_contact: bool
    left_pin: np.ndarray | None
    right_pin: np.ndarray | None

    @property
    def state(self) -> str:
        if self.left_contact and self.right_contact:
            return "both"
        if self.left_contact:
            return "left"
        if self.right_contact:
            return "right"
        return "none"


def _pelvis_at(cfg: GaitConfig, t: float) -> np.ndarray:
    phase_l = t / cfg.stride_period + cfg.left_leg_phase
    bob = math.cos(4.0 * math.pi * ((phase_l % 1.0) - cfg.duty_factor / 2.0))
    z = cfg.pelvis_height_mean - cfg.pelvis_height_amplitude * bob
    return np.array([cfg.start_x + cfg.speed * t, cfg.path_y, z])


def _ik_angles(hip: np.ndarray, ankle: np.ndarray, thigh: float, shin: float):
    """Two-link planar IK in the leg's sagittal plane (shared y).

    Returns (theta, flex): thigh angle from the downward vertical
    (positive forward along +x) and knee flexion; the knee is displaced
    forward of the hip-ankle chord.
    """
    wx, wz = ankle[0] - hip[0], ankle[2] - hip[2]
    c = math.hypot(wx, wz)
    if c > thigh + shin:
        raise UnreachableError(
            f"hip-ankle distance {c:.3f} m exceeds leg length {thigh + shin:.3f} m"
        )
    if c < abs(thigh - shin) or c == 0.0:
        raise UnreachableError("hip-ankle distance shorter than |thigh - shin|")
    beta = math.atan2(wx, -wz)
    cos_a = (thigh * thigh + c * c - shin * shin) / (2.0 * thigh * c)
    alpha = math.acos(min(1.0, max(-1.0, cos_a)))
    theta = beta + alpha
    knee = (hip[0] + thigh * math.sin(theta), hip[2] - thigh * math.cos(theta))
    psi = math.atan2(ankle[0] - knee[0], -(ankle[2] - knee[1]))
    return theta, theta - psi


def _leg_chain(hip: np.ndarray, theta: float, flex: float, thigh: float, shin: float):
    knee = hip + np.array([thigh * math.sin(theta), 0.0, -thigh * math.cos(theta)])
    psi = theta - flex
    ankle = knee + np.array([shin * math.sin(psi), 0.0, -shin * math.cos(psi)])
    return knee, ankle


def _cosine_step(s: float) -> float:
    return 0.5 * (1.0 - math.cos(math.pi * s))


def _leg_pose(cfg: GaitConfig, t: float, side: str):
    """Hip offset, knee, ankle for one leg plus (in_stance, pin)."""
    sign = 1.0 if side == "left" else -1.0
    phase = cfg.left_leg_phase if side == "left" else cfg.right_leg_phase
    hw = cfg.stance_width / 2.0
    ll = cfg.limb_lengths
    thigh = ll.of(f"{side}_hip", f"{side}_knee")
    shin = ll.of(f"{side}_knee", f"{side}_ankle")
    hip_len = ll.of("pelvis", f"{side}_hip")
    drop = math.sqrt(hip_len * hip_len - hw * hw)
    hip_offset = np.array([0.0, sign * hw, -drop])
    T = cfg.stride_period
    tau = cfg.duty_factor * T

    def hip_at(tt: float) -> np.ndarray:
        return _pelvis_at(cfg, tt) + hip_offset

    def pin(k: int) -> np.ndarray:
        t_td = (k - phase) * T
        x = cfg.start_x + cfg.speed * t_td + cfg.speed * tau / 2.0
        return np.array([x, cfg.path_y + sign * hw, 0.0])

    u = t / T + phase
    k = math.floor(u)
    phi = u - k
    hip = hip_at(t)
    if phi < cfg.duty_factor:
        ankle = pin(k)
        theta, flex = _ik_angles(hip, ankle, thigh, shin)
        knee, _ = _leg_chain(hip, theta, flex, thigh, shin)
        return hip, knee, ankle, True, ankle
    s = (phi - cfg.duty_factor) / (1.0 - cfg.duty_factor)
    t_off = (k - phase + cfg.duty_factor) * T
    t_td2 = (k + 1 - phase) * T
    theta_off, flex_off = _ik_angles(hip_at(t_off), pin(k), thigh, shin)
    theta_td, flex_td = _ik_angles(hip_at(t_td2), pin(k + 1), thigh, shin)
    w = _cosine_step(s)
    theta = theta_off + (theta_td - theta_off) * w
    lift = math.radians(cfg.swing_knee_lift_deg) * 0.5 * (1.0 - math.cos(2.0 * math.pi * s))
    flex = flex_off + (flex_td - flex_off) * w + lift
    knee, ankle = _leg_chain(hip, theta, flex, thigh, shin)
    return hip, knee, ankle, False, None


def _arm_pose(cfg: GaitConfig, t: float, side: str, neck: np.ndarray):
    sign = 1.0 if side == "left" else -1.0
    # arms swing antiphase to their own-side leg (with the opposite leg)
    phase = cfg.right_leg_phase if side == "left" else cfg.left_leg_phase
    hw = cfg.stance_width / 2.0
    ll = cfg.limb_lengths
    sh_len = ll.of("neck", f"{side}_shoulder")
    upper = ll.of(f"{side}_shoulder", f"{side}_elbow")
    fore = ll.of(f"{side}_elbow", f"{side}_wrist")
    drop = math.sqrt(sh_len * sh_len - hw * hw)
    shoulder = neck + np.array([0.0, sign * hw, -drop])
    phi = (t / cfg.stride_period + phase) % 1.0
    theta = -math.radians(cfg.arm_swing_deg) * math.cos(2.0 * math.pi * phi)
    elbow = shoulder + np.array([upper * math.sin(theta), 0.0, -upper * math.cos(theta)])
    bend = theta + math.radians(cfg.elbow_flexion_deg)
    wrist = elbow + np.array([fore * math.sin(bend), 0.0, -fore * math.cos(bend)])
    return shoulder, elbow, wrist


def generate_gait_frame(cfg: GaitConfig, t: float, frame_id: int = 0) -> GaitFrame:
    """Analytic running pose at time ``t`` seconds."""
    if t < 0:
        raise ValueError("t must be non-negative")
    ll = cfg.limb_lengths
    pts = np.empty((len(JOINTS), 3))
    pelvis = _pelvis_at(cfg, t)
    pts[JOINT_INDEX["pelvis"]] = pelvis
    lean = math.radians(cfg.body_lean_deg)
    axis = np.array([math.sin(lean), 0.0, math.cos(lean)])
    cursor = pelvis
    for parent, child in (("pelvis", "spine"), ("spine", "thorax"), ("thorax", "neck"), ("neck", "head")):
        cursor = cursor + ll.of(parent, child) * axis
        pts[JOINT_INDEX[child]] = cursor
    neck = pts[JOINT_INDEX["neck"]]
    pins = {}
    contacts = {}
    for side in ("left", "right"):
        hip, knee, ankle, stance, pin = _leg_pose(cfg, t, side)
        pts[JOINT_INDEX[f"{side}_hip"]] = hip
        pts[JOINT_INDEX[f"{side}_knee"]] = knee
        pts[JOINT_INDEX[f"{side}_ankle"]] = ankle
        contacts[side] = stance
        pins[side] = pin
        shoulder, elbow, wrist = _arm_pose(cfg, t, side, neck)
        pts[JOINT_INDEX[f"{side}_shoulder"]] = shoulder
        pts[JOINT_INDEX[f"{side}_elbow"]] = elbow
        pts[JOINT_INDEX[f"{side}_wrist"]] = wrist
    return GaitFrame(
        skeleton=Skeleton3D(frame_id, pts),
        left_contact=contacts["left"],
        right_contact=contacts["right"],
        left_pin=pins["left"],
        right_pin=pins["right"],
    )


# ---------------------------------------------------------------------------
# camera paths


@dataclass(eq=False)
class CameraPath:
    """Static-position camera that pans, tilts, and zooms over keyframes.

    Keyframes are (frame, azimuth_deg, elevation_deg, roll_deg, hfov_deg)
    tuples; attributes interpolate with natural cubic splines (linear for
    fewer than four keyframes) and clamp outside the keyframe range.
    """

    camera_center: np.ndarray
    keyframes: tuple

    def __post_init__(self):
        self.camera_center = np.asarray(self.camera_center, dtype=float).reshape(3)
        kf = sorted((tuple(map(float, k)) for k in self.keyframes), key=lambda k: k[0])
        if not kf:
            raise ValueError("need at least one keyframe")
        frames = [k[0] for k in kf]
        if len(set(frames)) != len(frames):
            raise ValueError("keyframe frames must be distinct")
        self.keyframes = tuple(kf)
        self._frames = np.array(frames)
        self._values = np.array([k[1:] for k in kf])  # (n, 4)
        if len(kf) >= 4:
            from scipy.interpolate import CubicSpline

            self._spline = CubicSpline(self._frames, self._values, bc_type="natural")
        else:
            self._spline = None

    def at(self, frame: float) -> tuple[float, float, float, float]:
        f = float(np.clip(frame, self._frames[0], self._frames[-1]))
        if self._spline is not None:
            vals = self._spline(f)
        elif len(self._frames) == 1:
            vals = self._values[0]
        else:
            vals = np.array(
                [np.interp(f, self._frames, self._values[:, i]) for i in range(4)]
            )
        return tuple(float(v) for v in vals)

    def calibration(self, frame: float, image_width: int, image_height: int) -> CameraCalibration:
        az, el, roll, hfov = self.at(frame)
        return CameraCalibration(
            Intrinsics(image_width, image_height, hfov),
            Extrinsics(az, el, roll, self.camera_center),
        )


def look_at_path(
    camera_center,
    targets: list,
    hfovs: list,
    frames: list,
    roll_deg: float = 0.0,
) -> CameraPath:
    """Camera path from look-at targets: keyframe angles aim the optical
    axis at each target point."""
    center = np.asarray(camera_center, dtype=float)
    kfs = []
    for frame, target, hfov in zip(frames, targets, hfovs):
        d = np.asarray(target, dtype=float) - center
        az = math.degrees(math.atan2(d[1], d[0]))
        el = math.degrees(math.atan2(d[2], math.hypot(d[0], d[1])))
        kfs.append((frame, az, el, roll_deg, hfov))
    return CameraPath(center, tuple(kfs))


# ---------------------------------------------------------------------------
# scene assembly


@dataclass(eq=False)
class NoiseConfig:
    sigma_joint_px: float = 0.0
    sigma_lane_px: float = 0.0

    @staticmethod
    def sigma_for_mean_radial_error(mean_px: float) -> float:
        """Gaussian sigma per axis giving the requested mean 2D error."""
        return mean_px * math.sqrt(2.0 / math.pi)


@dataclass(eq=False)
class FrameTruth:
    frame_id: int
    skeleton3d: Skeleton3D
    calibration: CameraCalibration
    skeleton2d: Skeleton2D          # exact pinhole projection
    lanes: LaneObservation          # exact projected segments
    contact_state: str
    left_pin: np.ndarray | None
    right_pin: np.ndarray | None
    skeleton2d_obs: Skeleton2D      # distorted/noisy variant (== exact if off)
    lanes_obs: LaneObservation


@dataclass(eq=False)
class SceneTruth:
    name: str
    frames: list
    fps: float
    image_width: int
    image_height: int
    track: TrackModel
    gait: GaitConfig
    path: CameraPath
    noise: NoiseConfig | None
    distortion: tuple | None
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def truth_skeletons(self) -> list:
        return [f.skeleton3d for f in self.frames]

    def truth_calibrations(self) -> list:
        return [f.calibration for f in self.frames]

    def observations_2d(self) -> list:
        return [f.skeleton2d_obs for f in self.frames]

    def observations_lanes(self) -> list:
        return [f.lanes_obs for f in self.frames]


def _lane_segments(cal: CameraCalibration, track: TrackModel, near_x: float,
                   width: int, height: int, min_px: float = 25.0) -> list:
    """Exact image segments of the boundary lines, clipped to the frame.

    Endpoints are true projections of boundary points, so the segments
    lie exactly on the projected lines.
    """
    xs = near_x + np.arange(-90.0, 90.0001, 0.25)
    segs = []
    for i, y in enumerate(track.boundary_ys):
        pts = np.stack([xs, np.full_like(xs, y), np.zeros_like(xs)], axis=1)
        uv, depth = project_points(cal, pts)
        ok = (
            (depth > 0.5)
            & (uv[:, 0] >= 0.0)
            & (uv[:, 0] <= width - 1.0)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] <= height - 1.0)
        )
        idx = np.nonzero(ok)[0]
        if idx.size < 2:
            continue
        a, b = uv[idx[0]], uv[idx[-1]]
        if math.hypot(*(a - b)) < min_px:
            continue
        segs.append(LaneSegment(a, b, i))
    return segs


def generate_scene(
    gait: GaitConfig,
    path: CameraPath,
    n_frames: int,
    fps: float = 50.0,
    track: TrackModel | None = None,
    noise: NoiseConfig | None = None,
    distortion: tuple | None = None,
    seed: int = 0,
    image_width: int = 1920,
    image_height: int = 1080,
    name: str = "scene",
) -> SceneTruth:
    """Assemble per-frame ground truth plus (optionally) noisy/distorted
    observations.  Deterministic for a given seed."""
    track = track or TrackModel()
    rng = np.random.default_rng(seed)
    model = DistortionModel(*distortion) if distortion is not None else None
    frames = []
    for f in range(n_frames):
        t = f / fps
        gf = generate_gait_frame(gait, t, frame_id=f)
        cal = path.calibration(f, image_width, image_height)
        uv, depth = project_points(cal, gf.skeleton.points)
        if np.any(depth <= 0):
            raise ValueError(f"frame {f}: athlete joints behind the camera")
        skel2d = Skeleton2D(f, uv, np.ones(len(JOINTS)))
        segs = _lane_segments(cal, track, near_x=gf.skeleton.point("pelvis")[0],
                              width=image_width, height=image_height)
        lanes = LaneObservation(f, tuple(segs))

        uv_obs = uv.copy()
        if model is not None:
            uv_obs = distort_pixels(model, uv_obs, image_width, image_height)
        if noise is not None and noise.sigma_joint_px > 0:
            uv_obs = uv_obs + rng.normal(0.0, noise.sigma_joint_px, uv_obs.shape)
        segs_obs = []
        for s in segs:
            a, b = s.a.copy(), s.b.copy()
            if model is not None:
                a = distort_pixels(model, a, image_width, image_height)
                b = distort_pixels(model, b, image_width, image_height)
            if noise is not None and noise.sigma_lane_px > 0:
                a = a + rng.normal(0.0, noise.sigma_lane_px, 2)
                b = b + rng.normal(0.0, noise.sigma_lane_px, 2)
            segs_obs.append(LaneSegment(a, b, s.lane_index))
        frames.append(
            FrameTruth(
                frame_id=f,
                skeleton3d=gf.skeleton,
                calibration=cal,
                skeleton2d=skel2d,
                lanes=lanes,
                contact_state=gf.state,
                left_pin=gf.left_pin,
                right_pin=gf.right_pin,
                skeleton2d_obs=Skeleton2D(f, uv_obs, np.ones(len(JOINTS))),
                lanes_obs=LaneObservation(f, tuple(segs_obs)),
            )
        )
    return SceneTruth(
        name=name,
        frames=frames,
        fps=fps,
        image_width=image_width,
        image_height=image_height,
        track=track,
        gait=gait,
        path=path,
        noise=noise,
        distortion=distortion,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# dataset sweeps


def default_gait_variants(n: int = 5) -> list:
    """Deterministic family of running styles: speed, cadence, limb scale,
    pelvis height, and stance width all vary."""
    out = []
    for i in range(n):
        u = i / max(n - 1, 1)
        scale = 0.95 + 0.10 * u
        lengths = LimbLengths(DEFAULT_LIMB_LENGTHS.lengths * scale)
        out.append(
            GaitConfig(
                speed=3.6 + 0.8 * u,
                cadence=2.8 + 0.4 * u,
                limb_lengths=lengths,
                pelvis_height_mean=(0.78 + 0.05 * u) * scale,
                pelvis_height_amplitude=0.03 + 0.01 * u,
                stance_width=0.10 + 0.04 * u,
                duty_factor=0.28 + 0.06 * u,
                body_lean_deg=4.0 + 4.0 * u,
                path_y=5.49 - 1.22 * (i % 2),
            )
        )
    return out


def default_camera_paths(gait: GaitConfig, n_frames: int, fps: float) -> list:
    """Two broadcast-style paths: down-track stands and closer infield."""
    duration = n_frames / fps
    x_end = gait.start_x + gait.speed * duration
    key_frames = [0, n_frames // 4, n_frames // 2, 3 * n_frames // 4, n_frames - 1]
    paths = []
    for center, hfovs in (
        (np.array([x_end + 22.0, -24.0, 7.5]), [9.0, 8.0, 7.0, 7.5, 8.5]),
        (np.array([x_end + 14.0, -17.0, 5.5]), [12.0, 10.5, 9.5, 10.0, 11.0]),
    ):
        targets = []
        for kf in key_frames:
            t = kf / fps
            x = gait.start_x + gait.speed * t
            targets.append(np.array([x, gait.path_y, 1.0]))
        paths.append(look_at_path(center, targets, hfovs, key_frames))
    return paths


@dataclass(eq=False)
class SweepSpec:
    """Matrix of gaits x camera paths rendered to SceneTruth sequences."""

    n_gaits: int = 5
    n_paths: int = 2
    n_frames: int = 300
    fps: float = 50.0
    image_width: int = 1920
    image_height: int = 1080
    seed: int = 7
    sigma_joint_px: float = 0.0
    sigma_lane_px: float = 0.0
    distortion: tuple | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        import dataclasses as dc

        known = {f.name for f in dc.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sweep spec keys: {sorted(unknown)}")
        if "distortion" in data and data["distortion"] is not None:
            data = dict(data)
            data["distortion"] = tuple(data["distortion"])
        return cls(**data)

    def to_dict(self) -> dict:
        import dataclasses as dc

        out = dc.asdict(self)
        if out["distortion"] is not None:
            out["distortion"] = list(out["distortion"])
        return out


def sweep_dataset(spec: SweepSpec) -> list:
    """Deterministic collection of scenes for the spec's gait x path matrix."""
    noise = None
    if spec.sigma_joint_px > 0 or spec.sigma_lane_px > 0:
        noise = NoiseConfig(spec.sigma_joint_px, spec.sigma_lane_px)
    scenes = []
    gaits = default_gait_variants(spec.n_gaits)
    for gi, gait in enumerate(gaits):
        paths = default_camera_paths(gait, spec.n_frames, spec.fps)[: spec.n_paths]
        for pi, path in enumerate(paths):
            scenes.append(
                generate_scene(
                    gait,
                    path,
                    spec.n_frames,
                    fps=spec.fps,
                    noise=noise,
                    distortion=spec.distortion,
                    seed=spec.seed * 1000 + gi * 10 + pi,
                    image_width=spec.image_width,
                    image_height=spec.image_height,
                    name=f"seq_g{gi}_p{pi}",
                )
            )
    return scenes
