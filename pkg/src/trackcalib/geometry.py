"""Core geometry: camera model, rays, intersections, lens distortion.

Conventions (see docs/coordinates.md for the full write-up):

* World frame, right handed: ``x`` points along the running direction of
  the straight, ``y`` lateral toward the outer lanes, ``z`` up.  The
  ground plane is ``z = 0`` with the origin on the inner edge of the
  lowest modeled lane boundary.
* Camera frame: ``x`` right, ``y`` down, ``z`` forward (optical axis).
* Image frame: pixels, origin top left, ``u`` right, ``v`` down.
* Orientation is applied yaw -> pitch -> roll: azimuth rotates about the
  world ``z`` axis (0 deg looks along ``+x``, 90 deg along ``+y``),
  elevation rotates about the camera ``x`` axis (positive tilts the view
  up), roll rotates about the optical axis (positive turns the image
  clockwise on screen).
* Angles are degrees at API boundaries and radians internally.  Lengths
  are meters, image coordinates pixels.

Everything here is a pure function on immutable values; all operations
accept and return float64 arrays and broadcast over leading dimensions
where documented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12

# Camera axes at zero azimuth/elevation/roll, as columns (right, down,
# forward) expressed in world coordinates: looking along +x with z up.
_BASE_AXES = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


class GeometryError(Exception):
    """Base class for geometric failure modes."""


class BehindCameraError(GeometryError):
    """Point has non-positive depth in the camera frame."""


class DegenerateError(GeometryError):
    """Input configuration admits no unique answer."""


class ParallelError(GeometryError):
    """Ray and plane (or lines) are parallel within tolerance."""


class BehindOriginError(GeometryError):
    """Intersection exists only at non-positive ray parameter."""


class NoConvergenceError(GeometryError):
    """Fixed-point iteration failed to converge."""


class AtInfinityError(GeometryError):
    """Projected entity lies on the plane at infinity of the image."""


def _rot_z(angle_rad):
    """Rotation about the z axis; broadcasts over leading dims."""
    a = np.asarray(angle_rad, dtype=float)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([
        np.stack([c, -s, z], axis=-1),
        np.stack([s, c, z], axis=-1),
        np.stack([z, z, o], axis=-1),
    ], axis=-2)


def _rot_x(angle_rad):
    """Rotation about the x axis; broadcasts over leading dims."""
    a = np.asarray(angle_rad, dtype=float)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([
        np.stack([o, z, z], axis=-1),
        np.stack([z, c, -s], axis=-1),
        np.stack([z, s, c], axis=-1),
    ], axis=-2)


def rotation_world_from_camera(azimuth_deg, elevation_deg, roll_deg):
    """Camera-to-world rotation; columns are camera axes in world coords.

    Broadcasts over leading dimensions of the three angle arrays.
    """
    az = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
    el = np.deg2rad(np.asarray(elevation_deg, dtype=float))
    ro = np.deg2rad(np.asarray(roll_deg, dtype=float))
    return _rot_z(az) @ _BASE_AXES @ _rot_x(el) @ _rot_z(ro)


def rotation_world_to_camera(azimuth_deg, elevation_deg, roll_deg):
    """World-to-camera rotation R with p_cam = R @ (p_world - center)."""
    R = rotation_world_from_camera(azimuth_deg, elevation_deg, roll_deg)
    return np.swapaxes(R, -1, -2)


@dataclass(frozen=True, eq=False)
class Intrinsics:
    """Pinhole intrinsics: centered principal point, square pixels, no skew."""

    image_width: int
    image_height: int
    hfov_deg: float

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0.0 < self.hfov_deg < 180.0:
            raise ValueError(f"hfov_deg must be in (0, 180), got {self.hfov_deg}")
        if not math.isfinite(self.focal_px) or self.focal_px <= 0:
            raise ValueError("focal length is not finite and positive")

    @property
    def focal_px(self) -> float:
        return (self.image_width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.image_width / 2.0, self.image_height / 2.0])

    @property
    def K(self) -> np.ndarray:
        f = self.focal_px
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    @staticmethod
    def hfov_for_focal(focal_px: float, image_width: int) -> float:
        """Inverse of :attr:`focal_px`, in degrees."""
        return math.degrees(2.0 * math.atan((image_width / 2.0) / focal_px))


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Camera pose: yaw/pitch/roll in degrees plus world-frame center."""

    azimuth_deg: float
    elevation_deg: float
    roll_deg: float
    camera_center: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.camera_center, dtype=float).reshape(3)
        if not np.all(np.isfinite(center)):
            raise ValueError("camera_center must be finite")
        object.__setattr__(self, "camera_center", center)
        R = self.R
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-12 or abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation is not orthonormal with det +1")

    @property
    def R(self) -> np.ndarray:
        """World-to-camera rotation."""
        return rotation_world_to_camera(self.azimuth_deg, self.elevation_deg, self.roll_deg)

    @property
    def t(self) -> np.ndarray:
        """Translation with p_cam = R @ p_world + t."""
        return -self.R @ self.camera_center


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    """Full calibration; projection matrix is P = K (R | t).

    ``P`` always has rank 3 because K is invertible and R orthonormal
    (both enforced at construction); projecting the camera center gives
    the degenerate zero homogeneous vector.
    """

    intrinsics: Intrinsics
    extrinsics: Extrinsics

    @property
    def P(self) -> np.ndarray:
        ext = self.extrinsics
        Rt = np.hstack([ext.R, ext.t.reshape(3, 1)])
        return self.intrinsics.K @ Rt

    @property
    def camera_center(self) -> np.ndarray:
        return self.extrinsics.camera_center


def project_points(cal: CameraCalibration, points) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3); returns (pixels (..., 2), depth (...,)).

    Does not raise on non-positive depth; callers filter on the returned
    depths (pixels are still the homogeneous dehomogenization there).
    """
    p = np.asarray(points, dtype=float)
    rel = p - cal.camera_center
    cam = rel @ cal.extrinsics.R.T
    depth = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = cam[..., :2] / depth[..., None]
    f = cal.intrinsics.focal_px
    return cal.intrinsics.principal_point + f * uv, depth


def project(cal: CameraCalibration, p) -> np.ndarray:
    """Project one world point to pixels; raises on degenerate input."""
    p = np.asarray(p, dtype=float).reshape(3)
    rel = p - cal.camera_center
    if np.linalg.norm(rel) < _EPS:
        raise DegenerateError("point coincides with the camera center")
    cam = cal.extrinsics.R @ rel
    if cam[2] <= 0.0:
        raise BehindCameraError(f"point has depth {cam[2]:.6g} <= 0")
    f = cal.intrinsics.focal_px
    return cal.intrinsics.principal_point + f * cam[:2] / cam[2]


@dataclass(frozen=True, eq=False)
class Ray:
    """Half-line from origin along a unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        direction = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must have unit norm")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @staticmethod
    def through(origin, target) -> "Ray":
        origin = np.asarray(origin, dtype=float).reshape(3)
        d = np.asarray(target, dtype=float).reshape(3) - origin
        n = np.linalg.norm(d)
        if n < _EPS:
            raise DegenerateError("ray target coincides with origin")
        return Ray(origin, d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane {p : normal . p = offset} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
            raise ValueError("plane normal must have unit norm")
        object.__setattr__(self, "normal", normal)


GROUND_PLANE = Plane(np.array([0.0, 0.0, 1.0]), 0.0)


def pixel_ray(cal: CameraCalibration, px) -> Ray:
    """Ray from the camera center through a pixel, into the scene."""
    px = np.asarray(px, dtype=float).reshape(2)
    n = (px - cal.intrinsics.principal_point) / cal.intrinsics.focal_px
    dir_cam = np.array([n[0], n[1], 1.0])
    dir_world = rotation_world_from_camera(
        cal.extrinsics.azimuth_deg, cal.extrinsics.elevation_deg, cal.extrinsics.roll_deg
    ) @ dir_cam
    dir_world /= np.linalg.norm(dir_world)
    return Ray(cal.camera_center, dir_world)


def pixel_rays(cal: CameraCalibration, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`pixel_ray`: returns (origin (3,), directions (..., 3))."""
    px = np.asarray(pixels, dtype=float)
    n = (px - cal.intrinsics.principal_point) / cal.intrinsics.focal_px
    dir_cam = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
    R_wc = rotation_world_from_camera(
        cal.extrinsics.azimuth_deg, cal.extrinsics.elevation_deg, cal.extrinsics.roll_deg
    )
    d = dir_cam @ R_wc.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return cal.camera_center, d


def intersect_ray_plane(ray: Ray, plane: Plane) -> np.ndarray:
    """Forward intersection of a ray with a plane."""
    denom = float(plane.normal @ ray.direction)
    if abs(denom) <= 1e-12:
        raise ParallelError("ray is parallel to the plane")
    t = (plane.offset - plane.normal @ ray.origin) / denom
    if t <= 0.0:
        raise BehindOriginError(f"intersection at t={t:.6g} <= 0")
    return ray.at(t)


def intersect_ray_sphere(ray: Ray, center, radius: float) -> list[np.ndarray]:
    """Forward intersections with a sphere, sorted by ray parameter.

    Returns 0, 1 (tangent or single forward root), or 2 points; an empty
    list means no intersection.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float).reshape(3)
    oc = center - ray.origin
    m = float(ray.direction @ oc)
    disc = m * m - (float(oc @ oc) - radius * radius)
    if disc < 0.0:
        return []
    if disc == 0.0:
        return [ray.at(m)] if m > 0.0 else []
    s = math.sqrt(disc)
    return [ray.at(t) for t in (m - s, m + s) if t > 0.0]


def closest_ray_point_to_sphere(ray: Ray, center, radius: float) -> np.ndarray:
    """Point on the sphere surface nearest the ray (miss fallback).

    Projects the sphere center onto the ray line and steps from the
    center toward that foot point by ``radius``.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float).reshape(3)
    t_foot = float(ray.direction @ (center - ray.origin))
    foot = ray.at(t_foot)
    v = foot - center
    n = np.linalg.norm(v)
    if n < _EPS:
        raise DegenerateError("ray passes through the sphere center")
    return center + radius * v / n


def vanishing_point_of_direction(cal: CameraCalibration, d) -> np.ndarray:
    """Image point where world lines of direction ``d`` converge.

    Independent of the camera center: computed from K R d alone.
    """
    d = np.asarray(d, dtype=float).reshape(3)
    h = cal.intrinsics.K @ (cal.extrinsics.R @ d)
    if abs(h[2]) <= 1e-12:
        raise AtInfinityError("direction is parallel to the image plane")
    return h[:2] / h[2]


@dataclass(frozen=True, eq=False)
class DistortionModel:
    """Two-coefficient radial distortion in normalized image coordinates.

    ``scale = 1 + k1 r^2 + k2 r^4`` with ``r^2 = x^2 + y^2``.  The model
    must be bijective over ``r ∈ [0, r_max]``: the radial map
    ``r -> r scale(r^2)`` is checked to be strictly increasing there.
    """

    k1: float
    k2: float
    r_max: float = 1.5

    def __post_init__(self):
        if self.r_max <= 0.0:
            raise ValueError("r_max must be positive")
        r = np.linspace(0.0, self.r_max, 513)
        r2 = r * r
        slope = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2
        if np.any(slope <= 0.0):
            raise ValueError("distortion is not monotone over [0, r_max]")

    def scale(self, r2):
        return 1.0 + self.k1 * r2 + self.k2 * r2 * r2


def distort(model: DistortionModel, points) -> np.ndarray:
    """Apply radial distortion to normalized points (..., 2)."""
    p = np.asarray(points, dtype=float)
    r2 = np.sum(p * p, axis=-1, keepdims=True)
    if np.any(r2 > model.r_max**2 * (1 + 1e-9)):
        raise ValueError("point outside the calibrated validity radius")
    return p * model.scale(r2)


def undistort(model: DistortionModel, points, max_iter: int = 20, tol: float = 1e-12) -> np.ndarray:
    """Invert :func:`distort` by fixed-point iteration."""
    pd = np.asarray(points, dtype=float)
    x = pd.copy()
    for _ in range(max_iter):
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        x_new = pd / model.scale(r2)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    raise NoConvergenceError("undistort fixed point did not converge")


def _pixels_to_normalized(pixels, image_width: int, image_height: int) -> np.ndarray:
    # Normalization by the half-width keeps the model independent of the
    # (unknown during registration) focal length.
    half_w = image_width / 2.0
    pp = np.array([image_width / 2.0, image_height / 2.0])
    return (np.asarray(pixels, dtype=float) - pp) / half_w


def _normalized_to_pixels(points, image_width: int, image_height: int) -> np.ndarray:
    half_w = image_width / 2.0
    pp = np.array([image_width / 2.0, image_height / 2.0])
    return np.asarray(points, dtype=float) * half_w + pp


def distort_pixels(model: DistortionModel, pixels, image_width: int, image_height: int) -> np.ndarray:
    """Distort pixel coordinates (..., 2) about the image center."""
    n = _pixels_to_normalized(pixels, image_width, image_height)
    return _normalized_to_pixels(distort(model, n), image_width, image_height)


def undistort_pixels(model: DistortionModel, pixels, image_width: int, image_height: int) -> np.ndarray:
    """Undistort pixel coordinates (..., 2) about the image center."""
    n = _pixels_to_normalized(pixels, image_width, image_height)
    return _normalized_to_pixels(undistort(model, n), image_width, image_height)
