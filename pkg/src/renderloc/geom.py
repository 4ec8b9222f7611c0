"""Rigid transforms, pinhole cameras, and sensor-prior rotations.

Coordinate conventions used throughout the package:

  Map/world frame (right-handed, metric):
    x east, y north, z up. Gravity pulls along (0, 0, -1).

  Camera frame (right-handed, standard computer vision):
    x right, y down, z forward (optical axis into the scene).

  Pose is the world->camera transform:  x_cam = R @ x_world + t.
  The camera center in world coordinates is C = -R^T @ t.

  Pixels are (u, v) = (column, row) in continuous coordinates; the ray
  through pixel (u, v) passes through camera point
  ((u - cx) / fx, (v - cy) / fy, 1).

Depth always means camera-space z, never ray length: that is what the
rasterizer's z-buffer stores and it makes back-projection a single
multiply per axis.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateGravity, InvalidDepth

ROT_ORTHO_TOL = 1e-9

# Local tangent-plane scale factors, meters per degree. Good to well
# under a meter over a few hundred meters, which is all the map covers.
M_PER_DEG_LAT = 110540.0
M_PER_DEG_LON_EQ = 111320.0


def _as_readonly(a, shape, name):
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    """World->camera rigid transform. Immutable; safe to share."""

    R: np.ndarray  # 3x3 orthonormal, det +1
    t: np.ndarray  # 3-vector, meters

    def __post_init__(self):
        object.__setattr__(self, "R", _as_readonly(self.R, (3, 3), "R"))
        object.__setattr__(self, "t", _as_readonly(self.t, (3,), "t"))
        err = np.linalg.norm(self.R.T @ self.R - np.eye(3))
        if err > 1e-7:
            raise ValueError(f"R is not orthonormal (|R^T R - I| = {err:.3g})")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-7:
            raise ValueError("R must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.R.T @ self.t

    @staticmethod
    def from_center(R, center) -> "Pose":
        """Build a pose from rotation and camera center (t = -R C)."""
        R = np.asarray(R, dtype=np.float64)
        return Pose(R, -R @ np.asarray(center, dtype=np.float64))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to world points, shape (3,) or (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self*other)(x) = self(other(x))."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have at least one pixel")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Same field of view at `factor` times the resolution."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class SensorPrior:
    """Noisy device measurements a localization starts from.

    Position is either map-frame meters (x, y) or GPS degrees (lat, lon);
    exactly one of the two must be given. `gravity` is the direction
    gravity pulls, expressed in the camera/device frame, unit norm.
    `heading_deg` is the compass direction of the optical axis, degrees
    clockwise from map north in [0, 360). `altitude_m` is the absolute
    camera height used for UAV priors.
    """

    heading_deg: float
    gravity: np.ndarray
    x: float | None = None
    y: float | None = None
    lat: float | None = None
    lon: float | None = None
    altitude_m: float | None = None

    def __post_init__(self):
        g = np.array(self.gravity, dtype=np.float64)
        if g.shape != (3,):
            raise ValueError("gravity must be a 3-vector")
        n = np.linalg.norm(g)
        if n < 1e-6:
            raise DegenerateGravity("gravity vector is numerically zero")
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"gravity must be unit norm, |g| = {n:.8f}")
        g.setflags(write=False)
        object.__setattr__(self, "gravity", g)
        h = float(self.heading_deg)
        if not (0.0 <= h < 360.0):
            raise ValueError("heading_deg must lie in [0, 360)")
        has_xy = self.x is not None and self.y is not None
        has_ll = self.lat is not None and self.lon is not None
        if has_xy == has_ll:
            raise ValueError("give exactly one of (x, y) or (lat, lon)")


# -- projection ----------------------------------------------------------

def project(point_world, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises BehindCamera when the camera-frame depth is <= 1e-9. The
    result may lie outside the image; clipping is the caller's business.
    """
    p = pose.R @ np.asarray(point_world, dtype=np.float64) + pose.t
    if p[2] <= 1e-9:
        raise BehindCamera(f"point depth {p[2]:.3g} m is not positive")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def project_points(points, pose: Pose, K: Intrinsics):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), z (N,)); entries with z <= 0 hold garbage
    pixels and must be masked by the caller. No exceptions.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ pose.R.T + pose.t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def backproject(pixel, depth: float, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Lift one pixel with camera-space depth z back to a world point.

    Exact inverse of `project` at the same pose. Depth must be positive
    and finite (the renderer marks empty pixels with +inf).
    """
    d = float(depth)
    if not math.isfinite(d) or d <= 0.0:
        raise InvalidDepth(f"depth {d!r} is not a positive finite value")
    u, v = float(pixel[0]), float(pixel[1])
    cam = np.array([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d])
    return pose.R.T @ (cam - pose.t)


def backproject_pixels(pixels, depths, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Vectorized backprojection of (N, 2) pixels with (N,) depths.

    Caller guarantees positive finite depths.
    """
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    cam = np.empty((len(d), 3))
    cam[:, 0] = (px[:, 0] - K.cx) / K.fx * d
    cam[:, 1] = (px[:, 1] - K.cy) / K.fy * d
    cam[:, 2] = d
    return (cam - pose.t) @ pose.R


# -- rotations -----------------------------------------------------------

def rot_z(angle_deg: float) -> np.ndarray:
    """Rotation about +z by `angle_deg` (x toward y for positive angles)."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(axis_angle) -> np.ndarray:
    """Rodrigues exponential of a rotation vector (radians)."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = w / theta
    K = skew(k)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def skew(v) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _rotation_between(a, b) -> np.ndarray:
    """Minimal (geodesic) rotation taking unit vector a onto unit vector b."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-12:
        if c > 0.0:
            return np.eye(3)
        # antiparallel: rotate 180 deg about any axis normal to a
        helper = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return so3_exp(axis * math.pi)
    return so3_exp(axis / s * math.atan2(s, c))


def heading_of(pose: Pose) -> float:
    """Compass azimuth of the optical axis, degrees clockwise from north.

    Falls back to the image-up direction when the camera looks straight
    along the vertical (azimuth of the forward axis undefined there).
    """
    fwd = pose.R[2, :]  # camera z in world coordinates
    if math.hypot(fwd[0], fwd[1]) < 1e-9:
        up = -pose.R[1, :]  # image up in world coordinates
        az = math.degrees(math.atan2(up[0], up[1]))
    else:
        az = math.degrees(math.atan2(fwd[0], fwd[1]))
    return az % 360.0


def rotation_from_gravity_compass(prior: SensorPrior) -> np.ndarray:
    """World->camera rotation from gravity direction and compass heading.

    Roll and pitch come from aligning the device gravity vector with
    world down via the minimal rotation; yaw is then fixed by rotating
    about world z until the optical axis' azimuth equals the heading.
    The two parts stay independent: the yaw rotation never disturbs the
    gravity alignment.
    """
    g = np.asarray(prior.gravity, dtype=np.float64)
    n = np.linalg.norm(g)
    if n < 1e-6:
        raise DegenerateGravity("gravity vector is numerically zero")
    g = g / n
    # camera->world alignment: gravity seen by the device maps to world down
    align = _rotation_between(g, np.array([0.0, 0.0, -1.0]))
    fwd = align @ np.array([0.0, 0.0, 1.0])
    if math.hypot(fwd[0], fwd[1]) < 1e-9:
        ref = align @ np.array([0.0, -1.0, 0.0])  # image up
        az0 = math.degrees(math.atan2(ref[0], ref[1]))
    else:
        az0 = math.degrees(math.atan2(fwd[0], fwd[1]))
    # Rz(phi) moves azimuth alpha to alpha - phi
    R_cw = rot_z(az0 - prior.heading_deg) @ align
    return R_cw.T


def yaw_rotated(pose: Pose, delta_deg: float) -> Pose:
    """Rotate the camera about the world vertical through its own center.

    Positive delta increases the compass heading; z, roll and pitch are
    untouched.
    """
    R = pose.R @ rot_z(delta_deg)
    return Pose.from_center(R, pose.center)


def pose_from_heading_pitch(center, heading_deg: float, pitch_deg: float) -> Pose:
    """Pose at `center` looking along `heading_deg`, pitched by `pitch_deg`.

    Positive pitch tilts the optical axis above the horizon, negative
    below (straight down is -90). Roll is zero.
    """
    h = math.radians(heading_deg)
    # level camera: right/down/forward rows expressed in world
    R_level = np.array(
        [
            [math.cos(h), -math.sin(h), 0.0],
            [0.0, 0.0, -1.0],
            [math.sin(h), math.cos(h), 0.0],
        ]
    )
    a = math.radians(-pitch_deg)  # rotate about the camera x (right) axis
    Rx = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, math.cos(a), -math.sin(a)],
            [0.0, math.sin(a), math.cos(a)],
        ]
    )
    return Pose.from_center(Rx @ R_level, center)


# -- error metrics and GPS -----------------------------------------------

def rotation_angle_deg(R1, R2) -> float:
    """Relative rotation angle in degrees, accurate near zero.

    Uses ||R1 - R2||_F = 2 sqrt(2) sin(theta/2), which keeps precision
    for tiny angles where the arccos-of-trace form bottoms out around
    1e-6 degrees.
    """
    fro = np.linalg.norm(np.asarray(R1) - np.asarray(R2))
    return math.degrees(2.0 * math.asin(min(1.0, fro / (2.0 * math.sqrt(2.0)))))


def pose_error(est: Pose, gt: Pose) -> tuple[float, float]:
    """(translation error m, rotation error deg) between two poses.

    Translation compares camera centers, not t vectors: t differences
    conflate rotation error. The trace argument is clamped because
    floating point can push it past +/-1 by ~1e-15.
    """
    trans = float(np.linalg.norm(est.center - gt.center))
    tr = float(np.trace(est.R @ gt.R.T))
    cos_angle = min(1.0, max(-1.0, (tr - 1.0) * 0.5))
    return trans, math.degrees(math.acos(cos_angle))


def gps_to_xy(lat: float, lon: float, origin_lat: float, origin_lon: float):
    """Local tangent-plane conversion of GPS degrees to map meters."""
    x = (lon - origin_lon) * math.cos(math.radians(origin_lat)) * M_PER_DEG_LON_EQ
    y = (lat - origin_lat) * M_PER_DEG_LAT
    return x, y
