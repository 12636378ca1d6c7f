"""Synthetic face renderer with exact gaze/pose/landmark ground truth.

Each sample is built in 3D: facial features live on a plane in front of the
head origin, get rotated by the head pose, translated into camera space,
and projected through the pinhole camera.  Gaze is sampled relative to the
head frame and rotated into camera coordinates, so head pose and eye-in-head
direction are separable signals.  The rendered appearance encodes:

  * head pose        - position, foreshortening, and parallax of all features
  * gaze (in head)   - iris dots displaced inside the eye ellipses, plus a
                       smaller displacement of the mouth bar (a deliberate
                       non-eye gaze cue so that faces with occluded eyes
                       still carry information beyond head pose)
  * illumination     - a signed left-right linear shading gradient
  * pixel noise      - additive Gaussian, clipped to [0, 1]

The gaze target is the exact intersection of the gaze ray with the screen
plane, so stored on-screen coordinates re-derive to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Sample, write_manifest
from .geometry import CameraModel, HeadPose, ScreenPlane, angles_to_vector, vector_to_angles
from .imaging import write_png

MAX_ANGLE = np.pi / 3

# mm of feature displacement per radian of eye-in-head gaze
IRIS_GAIN = 18.0
MOUTH_GAIN = 12.0
# subjects look on average slightly below their head's forward axis
REL_PITCH_BIAS = -0.08
# facial features sit this far in front of the head origin (mm)
FEATURE_DEPTH = -25.0


@dataclass(frozen=True)
class SynthConfig:
    persons: int = 15
    samples_per_person: int = 200
    image_size: tuple[int, int] = (320, 240)  # (w, h) px of the rendered frame
    focal: float = 380.0
    gaze_yaw_range: float = 0.35
    gaze_pitch_range: float = 0.30
    head_yaw_range: float = 0.30
    head_pitch_range: float = 0.25
    head_roll_range: float = 0.10
    distance: float = 600.0
    distance_jitter: float = 40.0
    offset: float = 40.0
    illumination_range: float = 0.8
    noise_std: float = 0.02
    seed: int = 7

    def __post_init__(self):
        for name in ("gaze_yaw_range", "gaze_pitch_range", "head_yaw_range",
                     "head_pitch_range", "head_roll_range"):
            v = getattr(self, name)
            if not 0.0 <= v <= MAX_ANGLE:
                raise ValueError(f"{name} must be within [0, pi/3], got {v}")
        if self.gaze_pitch_range + abs(REL_PITCH_BIAS) > MAX_ANGLE:
            raise ValueError("gaze_pitch_range + bias exceeds pi/3")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")
        if self.persons < 1 or self.samples_per_person < 1:
            raise ValueError("persons and samples_per_person must be >= 1")
        if self.distance <= self.distance_jitter:
            raise ValueError("distance must exceed distance_jitter")

    def camera(self) -> CameraModel:
        w, h = self.image_size
        proj = np.array([
            [self.focal, 0.0, w / 2.0],
            [0.0, self.focal, h / 2.0],
            [0.0, 0.0, 1.0],
        ])
        return CameraModel(proj, w, h)

    def screen(self) -> ScreenPlane:
        # screen coplanar with the camera x-y plane, origin at its top-left,
        # camera at the top center (desk monitor with a webcam on top)
        res = (1280, 800)
        pitch = (0.25, 0.25)
        translation = np.array([-res[0] * pitch[0] / 2.0, 20.0, 0.0])
        return ScreenPlane(np.eye(3), translation, pitch, res)


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@dataclass(frozen=True)
class PersonGeometry:
    """Per-person face proportions (head frame, mm) and albedos."""

    eye_inner_x: float
    eye_outer_x: float
    eye_y: float
    eye_aspect: float
    iris_radius: float
    mouth_half_width: float
    mouth_y: float
    mouth_half_height: float
    face_a: float
    face_b: float
    face_value: float
    white_value: float
    iris_value: float
    mouth_value: float

    def landmarks_head(self, rel_gaze: np.ndarray) -> np.ndarray:
        """Six landmark positions in the head frame; mouth corners follow
        the (small) gaze-coupled mouth displacement."""
        shift = -MOUTH_GAIN * rel_gaze
        return np.array([
            [-self.eye_outer_x, self.eye_y, FEATURE_DEPTH],
            [-self.eye_inner_x, self.eye_y, FEATURE_DEPTH],
            [self.eye_inner_x, self.eye_y, FEATURE_DEPTH],
            [self.eye_outer_x, self.eye_y, FEATURE_DEPTH],
            [-self.mouth_half_width + shift[0], self.mouth_y + shift[1], FEATURE_DEPTH],
            [self.mouth_half_width + shift[0], self.mouth_y + shift[1], FEATURE_DEPTH],
        ])


def person_geometry(person_id: int) -> PersonGeometry:
    """Base face geometry, deterministic from the person id alone."""
    rng = np.random.default_rng(10_000 + int(person_id))
    scale = rng.uniform(0.92, 1.08)
    return PersonGeometry(
        eye_inner_x=scale * rng.uniform(10.5, 13.5),
        eye_outer_x=scale * rng.uniform(28.0, 32.0),
        eye_y=scale * rng.uniform(-13.5, -10.0),
        eye_aspect=rng.uniform(0.45, 0.55),
        iris_radius=scale * rng.uniform(2.9, 3.5),
        mouth_half_width=scale * rng.uniform(16.0, 20.0),
        mouth_y=scale * rng.uniform(21.0, 26.0),
        mouth_half_height=scale * rng.uniform(2.0, 3.0),
        face_a=scale * rng.uniform(67.0, 77.0),
        face_b=scale * rng.uniform(86.0, 98.0),
        face_value=rng.uniform(0.70, 0.80),
        white_value=rng.uniform(0.92, 0.97),
        iris_value=rng.uniform(0.05, 0.12),
        mouth_value=rng.uniform(0.20, 0.30),
    )


def _fill_ellipse(img: np.ndarray, center, axes, angle: float, value: float) -> None:
    h, w = img.shape
    cx, cy = center
    a, b = axes
    if a <= 0 or b <= 0:
        return
    r = max(a, b)
    x0 = max(int(np.floor(cx - r)), 0)
    x1 = min(int(np.ceil(cx + r)) + 1, w)
    y0 = max(int(np.floor(cy - r)), 0)
    y1 = min(int(np.ceil(cy + r)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cx
    dy = ys - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / a
    v = (-dx * sa + dy * ca) / b
    img[y0:y1, x0:x1][u * u + v * v <= 1.0] = value


def _project(camera: CameraModel, pts: np.ndarray) -> np.ndarray:
    q = pts @ camera.projection.T
    return q[:, :2] / q[:, 2:3]


def render_sample(
    cfg: SynthConfig,
    geom: PersonGeometry,
    head: HeadPose,
    rel_gaze_angles,
    illumination: float,
    noise_rng: np.random.Generator | None,
):
    """Render one face and return (image, landmarks2d, landmarks3d, gaze
    vector in camera coords, gaze target on the screen, on-screen px)."""
    camera = cfg.camera()
    screen = cfg.screen()
    rel = np.asarray(rel_gaze_angles, dtype=float)
    rel_vec = angles_to_vector(rel)
    g_cam = head.rotation @ rel_vec

    lm_head = geom.landmarks_head(rel)
    lm3d = lm_head @ head.rotation.T + head.translation
    lm2d = _project(camera, lm3d)

    ref = lm3d.mean(axis=0)
    denom = g_cam @ screen.normal
    t_hit = float((screen.translation - ref) @ screen.normal) / float(denom)
    target = ref + t_hit * g_cam
    local = screen.rotation.T @ (target - screen.translation)
    on_screen_px = local[:2] / np.asarray(screen.pixel_pitch)

    # --- rendering ---
    w, h = cfg.image_size
    img = np.full((h, w), 0.15)

    z_center = head.translation[2]
    px_per_mm = cfg.focal / z_center
    head_fwd = head.rotation @ np.array([0.0, 0.0, -1.0])
    fwd_angles = vector_to_angles(head_fwd)
    roll = np.arctan2(head.rotation[1, 0], head.rotation[0, 0])
    center2d = _project(camera, head.translation[None])[0]
    _fill_ellipse(
        img,
        center2d,
        (geom.face_a * abs(np.cos(fwd_angles[0])) * px_per_mm,
         geom.face_b * abs(np.cos(fwd_angles[1])) * px_per_mm),
        roll,
        geom.face_value,
    )

    iris_shift = -IRIS_GAIN * rel
    eyes = []
    for sign, inner, outer in ((-1, lm_head[1], lm_head[0]), (1, lm_head[2], lm_head[3])):
        center_h = (inner + outer) / 2.0
        iris_h = center_h + np.array([iris_shift[0], iris_shift[1], 0.0])
        eyes.append((center_h, iris_h, np.linalg.norm(outer - inner) / 2.0))
    mouth_center_h = (lm_head[4] + lm_head[5]) / 2.0

    def head_to_px(p_head: np.ndarray) -> np.ndarray:
        p = head.rotation @ p_head + head.translation
        return _project(camera, p[None])[0]

    for center_h, iris_h, semi_mm in eyes:
        c2d = head_to_px(center_h)
        depth = (head.rotation @ center_h + head.translation)[2]
        s = cfg.focal / depth
        a_px = semi_mm * abs(np.cos(fwd_angles[0])) * s
        b_px = semi_mm * geom.eye_aspect * s
        _fill_ellipse(img, c2d, (a_px, b_px), roll, geom.white_value)
        i2d = head_to_px(iris_h)
        _fill_ellipse(img, i2d, (geom.iris_radius * s, geom.iris_radius * s), 0.0, geom.iris_value)

    m2d = head_to_px(mouth_center_h)
    m_depth = (head.rotation @ mouth_center_h + head.translation)[2]
    ms = cfg.focal / m_depth
    _fill_ellipse(
        img,
        m2d,
        (geom.mouth_half_width * abs(np.cos(fwd_angles[0])) * ms, geom.mouth_half_height * ms),
        roll,
        geom.mouth_value,
    )

    if illumination != 0.0:
        xn = (np.arange(w) - (w - 1) / 2.0) / ((w - 1) / 2.0)
        img *= 1.0 + 0.35 * illumination * xn[None, :]
    if noise_rng is not None and cfg.noise_std > 0.0:
        img += noise_rng.normal(0.0, cfg.noise_std, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img, lm2d, lm3d, g_cam, target, on_screen_px


def draw_pose(cfg: SynthConfig, rng: np.random.Generator) -> HeadPose:
    yaw = rng.uniform(-cfg.head_yaw_range, cfg.head_yaw_range)
    pitch = rng.uniform(-cfg.head_pitch_range, cfg.head_pitch_range)
    roll = rng.uniform(-cfg.head_roll_range, cfg.head_roll_range)
    rotation = rot_y(yaw) @ rot_x(pitch) @ rot_z(roll)
    translation = np.array([
        rng.uniform(-cfg.offset, cfg.offset),
        rng.uniform(-cfg.offset, cfg.offset),
        cfg.distance + rng.uniform(-cfg.distance_jitter, cfg.distance_jitter),
    ])
    return HeadPose(rotation, translation)


def draw_rel_gaze(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    return np.array([
        rng.uniform(-cfg.gaze_yaw_range, cfg.gaze_yaw_range),
        REL_PITCH_BIAS + rng.uniform(-cfg.gaze_pitch_range, cfg.gaze_pitch_range),
    ])


def generate(cfg: SynthConfig, out_dir) -> tuple[list[Sample], Path]:
    """Render the full dataset to ``out_dir`` and write its manifest.

    Layout: person_<id>/<index>.png + manifest.csv.  Byte-identical for
    identical configs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    camera = cfg.camera()
    screen = cfg.screen()
    samples: list[Sample] = []
    for pid in range(cfg.persons):
        geom = person_geometry(pid)
        person_dir = out_dir / f"person_{pid:02d}"
        person_dir.mkdir(exist_ok=True)
        for idx in range(cfg.samples_per_person):
            head = draw_pose(cfg, rng)
            rel = draw_rel_gaze(cfg, rng)
            illum = rng.uniform(-cfg.illumination_range, cfg.illumination_range)
            img, lm2d, lm3d, _, target, on_px = render_sample(cfg, geom, head, rel, illum, rng)
            rel_path = Path(f"person_{pid:02d}") / f"{idx:03d}.png"
            write_png(out_dir / rel_path, img)
            samples.append(
                Sample(
                    person_id=pid,
                    image_path=rel_path,
                    landmarks2d=lm2d,
                    landmarks3d=lm3d,
                    head=head,
                    camera=camera,
                    gaze_target=target,
                    screen=screen,
                    on_screen_px=on_px,
                )
            )
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, samples)
    # switch stored paths to absolute for in-process use
    for s in samples:
        s.image_path = out_dir / s.image_path
    return samples, manifest
