"""3D camera and gaze geometry.

Coordinate conventions used throughout the package:

  Camera frame (right-handed, standard computer vision):
    x right, y down, z forward into the scene.  The subject's face sits at
    positive z and gazes back toward the camera/screen, so gaze vectors
    have negative z.

  Gaze angles:
    pitch = arcsin(-g_y), yaw = atan2(-g_x, -g_z).  (yaw, pitch) = (0, 0)
    means gazing along -z, straight at the camera.  Positive yaw is gaze
    toward the camera's -x side, positive pitch is gaze upward.

  Units: millimetres for lengths, radians for angles (degrees only at
  reporting boundaries), pixels for image coordinates.

The normalization transform maps an arbitrary camera/pose configuration
into a canonical "normalized" camera that looks straight at a reference
point on the face from a fixed distance, with its x-axis parallel to the
head's x-axis.  Images follow through a single 3x3 homography.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6
ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid or degenerate geometric input."""


class DegenerateGeometryError(GeometryError):
    """Input configuration has no well-defined solution."""


class NoIntersectionError(GeometryError):
    """Ray is parallel to the target plane."""


class BehindScreenError(GeometryError):
    """Ray intersects the plane at a non-positive parameter (points away)."""


def _as_matrix(value, shape, name: str) -> np.ndarray:
    m = np.asarray(value, dtype=float)
    if m.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise GeometryError(f"{name} contains non-finite entries")
    return m


def check_rotation(r: np.ndarray, name: str = "rotation", tol: float = ORTHO_TOL) -> np.ndarray:
    r = _as_matrix(r, (3, 3), name)
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise GeometryError(f"{name} is not orthonormal within {tol}")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise GeometryError(f"{name} has determinant != +1 within {tol}")
    return r


def check_unit(g, name: str = "gaze vector", tol: float = UNIT_TOL) -> np.ndarray:
    g = np.asarray(g, dtype=float).reshape(3)
    n = np.linalg.norm(g)
    if not np.isfinite(n) or abs(n - 1.0) > tol:
        raise GeometryError(f"{name} must be unit length, got norm {n}")
    return g


def unit(v) -> np.ndarray:
    """Normalize a 3-vector to unit length."""
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if n <= 0.0 or not np.isfinite(n):
        raise DegenerateGeometryError("cannot normalize zero or non-finite vector")
    return v / n


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics (pixels) plus the image size they correspond to."""

    projection: np.ndarray  # 3x3 intrinsic matrix
    width: int
    height: int

    def __post_init__(self):
        p = _as_matrix(self.projection, (3, 3), "projection")
        if p[0, 0] <= 0.0 or p[1, 1] <= 0.0:
            raise GeometryError("focal terms of projection must be strictly positive")
        if abs(np.linalg.det(p)) < 1e-12:
            raise GeometryError("projection matrix is singular")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        object.__setattr__(self, "projection", p)


@dataclass(frozen=True)
class HeadPose:
    """Rigid head pose: rotation head->camera and head origin in camera coords (mm)."""

    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation, "head rotation"))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("head translation contains non-finite entries")
        object.__setattr__(self, "translation", t)

    @property
    def x_axis(self) -> np.ndarray:
        """Head x-axis expressed in camera coordinates."""
        return self.rotation[:, 0]


@dataclass(frozen=True)
class NormalizationSpace:
    """Canonical training space: fixed distance to the reference point and fixed camera."""

    distance: float  # mm
    camera: CameraModel

    def __post_init__(self):
        if self.distance <= 0.0:
            raise GeometryError("normalization distance must be positive")

    @property
    def output_size(self) -> tuple[int, int]:
        return (self.camera.width, self.camera.height)


@dataclass(frozen=True)
class NormalizationTransform:
    """Rotation R, depth scaling S, conversion M = S @ R and image homography."""

    rotation: np.ndarray  # R, 3x3
    scaling: np.ndarray  # S, diagonal 3x3
    conversion: np.ndarray  # M = S @ R
    image_homography: np.ndarray  # W_img = C_s @ M @ C_r^-1

    def __post_init__(self):
        r = check_rotation(self.rotation, "R")
        s = _as_matrix(self.scaling, (3, 3), "S")
        m = _as_matrix(self.conversion, (3, 3), "M")
        w = _as_matrix(self.image_homography, (3, 3), "W_img")
        if np.max(np.abs(s - np.diag(np.diag(s)))) != 0.0:
            raise GeometryError("S must be diagonal")
        if np.max(np.abs(m - s @ r)) > 1e-12:
            raise GeometryError("M must equal S @ R within 1e-12")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "scaling", s)
        object.__setattr__(self, "conversion", m)
        object.__setattr__(self, "image_homography", w)


@dataclass(frozen=True)
class ScreenPlane:
    """Target plane pose in camera coordinates.

    Screen points (u, v) in mm map to camera coords as
    rotation @ (u, v, 0) + translation; the plane normal is the third
    rotation column.  pixel_pitch converts screen mm to screen pixels.
    """

    rotation: np.ndarray  # 3x3, screen->camera
    translation: np.ndarray  # (3,), mm
    pixel_pitch: tuple[float, float]  # mm/px along screen x and y
    resolution: tuple[int, int]  # px

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation, "screen rotation"))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)
        if self.pixel_pitch[0] <= 0.0 or self.pixel_pitch[1] <= 0.0:
            raise GeometryError("pixel pitch components must be positive")

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]


def project_point(camera: CameraModel, p) -> np.ndarray:
    """Project a 3D camera-space point to pixel coordinates."""
    p = np.asarray(p, dtype=float).reshape(3)
    q = camera.projection @ p
    if abs(q[2]) < 1e-12:
        raise DegenerateGeometryError("point projects to infinity (zero depth)")
    return q[:2] / q[2]


def apply_homography(h, pt) -> np.ndarray:
    """Apply a 3x3 homography to a 2D point."""
    h = np.asarray(h, dtype=float)
    pt = np.asarray(pt, dtype=float).reshape(2)
    q = h @ np.array([pt[0], pt[1], 1.0])
    if abs(q[2]) < 1e-12:
        raise DegenerateGeometryError("homography maps point to infinity")
    return q[:2] / q[2]


def build_normalization(
    head: HeadPose,
    ref_point,
    space: NormalizationSpace,
    input_camera: CameraModel,
) -> NormalizationTransform:
    """Construct the transform that maps the input camera onto the normalized one.

    The rotated camera looks straight at ``ref_point`` with its x-axis made
    parallel to the head x-axis; the scaling fixes the apparent distance at
    ``space.distance``.  Frame construction (rows of R):

        f  = ref_point / ||ref_point||            (new z, forward)
        d  = normalize(f x head_x_axis)           (new y, down)
        r  = normalize(d x f)                     (new x, right)
    """
    x = np.asarray(ref_point, dtype=float).reshape(3)
    dist = np.linalg.norm(x)
    if dist < 1e-9:
        raise DegenerateGeometryError("reference point is at the camera origin")
    forward = x / dist
    head_x = head.x_axis
    down = np.cross(forward, head_x)
    if np.linalg.norm(down) < 1e-6:
        raise DegenerateGeometryError("head x-axis is parallel to the forward direction")
    down = down / np.linalg.norm(down)
    right = np.cross(down, forward)
    right = right / np.linalg.norm(right)
    rot = np.stack([right, down, forward])
    scale = np.diag([1.0, 1.0, space.distance / dist])
    conv = scale @ rot
    warp = space.camera.projection @ conv @ np.linalg.inv(input_camera.projection)
    return NormalizationTransform(rotation=rot, scaling=scale, conversion=conv, image_homography=warp)


def normalize_gaze(t: NormalizationTransform, g, direction: str = "forward") -> np.ndarray:
    """Map a unit gaze vector through the conversion matrix (or its inverse).

    The conversion includes the depth scaling, so the result is re-normalized
    to unit length before returning.
    """
    g = check_unit(g)
    if direction == "forward":
        m = t.conversion
    elif direction == "inverse":
        m = np.linalg.inv(t.conversion)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if abs(np.linalg.det(m)) < 1e-15:
        raise DegenerateGeometryError("conversion matrix is singular")
    return unit(m @ g)


def vector_to_angles(g) -> np.ndarray:
    """Unit gaze vector -> (yaw, pitch) radians."""
    g = check_unit(g)
    pitch = np.arcsin(np.clip(-g[1], -1.0, 1.0))
    yaw = np.arctan2(-g[0], -g[2])
    return np.array([yaw, pitch])


def angles_to_vector(a) -> np.ndarray:
    """(yaw, pitch) radians -> unit gaze vector."""
    a = np.asarray(a, dtype=float).reshape(2)
    yaw, pitch = a
    if abs(pitch) >= np.pi / 2:
        raise GeometryError(f"|pitch| must be < pi/2, got {pitch}")
    cp = np.cos(pitch)
    return np.array([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)])


def intersect_screen(origin, g, screen: ScreenPlane, units: str = "mm") -> np.ndarray:
    """Intersect a gaze ray with the screen plane.

    Returns the hit point in 2D screen coordinates, in mm from the screen
    origin or in pixels via the pixel pitch.  The ray must point toward the
    plane (positive ray parameter).
    """
    origin = np.asarray(origin, dtype=float).reshape(3)
    g = check_unit(g)
    n = screen.normal
    denom = float(n @ g)
    if abs(denom) <= 1e-9:
        raise NoIntersectionError("gaze ray is parallel to the screen plane")
    t = float(n @ (screen.translation - origin)) / denom
    if t <= 0.0:
        raise BehindScreenError("gaze ray points away from the screen plane")
    hit = origin + t * g
    local = screen.rotation.T @ (hit - screen.translation)
    point = local[:2]
    if units == "mm":
        return point
    if units == "px":
        return point / np.asarray(screen.pixel_pitch, dtype=float)
    raise ValueError(f"units must be 'mm' or 'px', got {units!r}")


def reference_point(landmarks3d) -> np.ndarray:
    """Centroid of the six facial landmarks (mm, camera coordinates)."""
    lm = np.asarray(landmarks3d, dtype=float)
    if lm.shape != (6, 3):
        raise GeometryError(f"expected six 3D landmarks with shape (6, 3), got {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise GeometryError("landmarks contain non-finite entries")
    return lm.mean(axis=0)
