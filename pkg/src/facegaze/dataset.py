"""Sample schema, manifest ingestion, and the per-sample normalization pipeline.

A manifest is a flat UTF-8 CSV with a fixed header (see MANIFEST_COLUMNS).
Floats are stored with full repr precision so rotation matrices survive the
round trip within validation tolerances.  Screen columns may be left empty
when no screen pose is available.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import imaging
from .geometry import (
    CameraModel,
    GeometryError,
    HeadPose,
    NormalizationSpace,
    NormalizationTransform,
    ScreenPlane,
    apply_homography,
    build_normalization,
    intersect_screen,
    normalize_gaze,
    reference_point,
    unit,
    vector_to_angles,
)


class ManifestError(ValueError):
    pass


# landmark order: outer-left, inner-left, inner-right, outer-right eye
# corners, then left and right mouth corners (left/right in image terms)
LANDMARK_NAMES = ["ol", "il", "ir", "or", "ml", "mr"]

MANIFEST_COLUMNS = (
    ["person_id", "image", "fx", "fy", "cx", "cy"]
    + [f"lm2d_{n}_{a}" for n in LANDMARK_NAMES for a in "xy"]
    + [f"lm3d_{n}_{a}" for n in LANDMARK_NAMES for a in "xyz"]
    + [f"head_r{i}{j}" for i in range(3) for j in range(3)]
    + [f"head_t{a}" for a in "xyz"]
    + [f"gaze_{a}" for a in "xyz"]
    + [f"screen_r{i}{j}" for i in range(3) for j in range(3)]
    + [f"screen_t{a}" for a in "xyz"]
    + ["screen_pitch_x", "screen_pitch_y", "screen_res_x", "screen_res_y"]
    + ["on_screen_x", "on_screen_y"]
)

ON_SCREEN_TOL_PX = 2.0


@dataclass
class Sample:
    """One face observation with full 3D annotations (camera coordinates, mm)."""

    person_id: int
    image_path: Path
    landmarks2d: np.ndarray  # (6, 2) px
    landmarks3d: np.ndarray  # (6, 3) mm
    head: HeadPose
    camera: CameraModel
    gaze_target: np.ndarray  # (3,) mm
    screen: ScreenPlane | None = None
    on_screen_px: np.ndarray | None = None


@dataclass
class NormalizedSample:
    """A sample mapped into the normalized training space."""

    image: np.ndarray  # (H, W) grayscale, [0, 1]
    gaze_angles: np.ndarray  # (2,) yaw, pitch in normalized space
    head_angles: np.ndarray  # (2,) head-forward direction in normalized space
    transform: NormalizationTransform
    landmarks2d: np.ndarray  # (6, 2) landmark positions in the normalized image
    reference: np.ndarray  # (3,) gaze origin in input camera coordinates


def sample_gaze_vector(sample: Sample, reference: str = "landmarks") -> np.ndarray:
    """Unit gaze direction in camera coordinates from the chosen origin."""
    ref = reference_point_for(sample, reference)
    return unit(sample.gaze_target - ref)


def reference_point_for(sample: Sample, reference: str = "landmarks") -> np.ndarray:
    """Gaze-origin conventions: the 6-landmark centroid, a single eye's
    corner midpoint, or the midpoint of the two eyes."""
    lm = sample.landmarks3d
    if reference == "landmarks":
        return reference_point(lm)
    if reference == "left_eye":
        return lm[0:2].mean(axis=0)
    if reference == "right_eye":
        return lm[2:4].mean(axis=0)
    if reference == "eyes_midpoint":
        return lm[0:4].mean(axis=0)
    raise ValueError(f"unknown reference {reference!r}")


def normalize_sample(
    sample: Sample,
    space: NormalizationSpace,
    image: np.ndarray | None = None,
    reference: str = "landmarks",
) -> NormalizedSample:
    """Warp one sample into the normalized space and express gaze and head
    pose as angles there."""
    ref = reference_point_for(sample, reference)
    transform = build_normalization(sample.head, ref, space, sample.camera)
    if image is None:
        image = imaging.read_png(sample.image_path)
    gray = imaging.to_gray(image)
    warped = imaging.warp_perspective(gray, transform.image_homography, space.output_size)
    g_cam = unit(sample.gaze_target - ref)
    gaze_angles = vector_to_angles(normalize_gaze(transform, g_cam))
    head_forward = sample.head.rotation @ np.array([0.0, 0.0, -1.0])
    head_angles = vector_to_angles(normalize_gaze(transform, head_forward))
    lm_norm = np.stack([
        apply_homography(transform.image_homography, p) for p in sample.landmarks2d
    ])
    return NormalizedSample(
        image=warped,
        gaze_angles=gaze_angles,
        head_angles=head_angles,
        transform=transform,
        landmarks2d=lm_norm,
        reference=ref,
    )


def mirror_sample(sample: Sample, image: np.ndarray) -> tuple[Sample, np.ndarray]:
    """Horizontally flip a sample: image columns, landmark order and
    positions, and all 3D quantities reflected through the camera's x = 0
    plane.  Normalized gaze yaw negates exactly under this operation.

    The screen pose is dropped (set to None) in the mirrored sample.
    """
    flip = np.diag([-1.0, 1.0, 1.0])
    order = [3, 2, 1, 0, 5, 4]
    w = sample.camera.width
    lm2d = sample.landmarks2d[order].copy()
    lm2d[:, 0] = (w - 1) - lm2d[:, 0]
    lm3d = sample.landmarks3d[order] @ flip
    proj = sample.camera.projection.copy()
    proj[0, 2] = (w - 1) - proj[0, 2]
    camera = CameraModel(proj, sample.camera.width, sample.camera.height)
    head = HeadPose(flip @ sample.head.rotation @ flip, flip @ sample.head.translation)
    return (
        Sample(
            person_id=sample.person_id,
            image_path=sample.image_path,
            landmarks2d=lm2d,
            landmarks3d=lm3d,
            head=head,
            camera=camera,
            gaze_target=flip @ sample.gaze_target,
            screen=None,
            on_screen_px=None,
        ),
        image[:, ::-1].copy(),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def sample_to_row(sample: Sample) -> list[str]:
    cam = sample.camera.projection
    row = [
        str(sample.person_id),
        str(sample.image_path),
        _fmt(cam[0, 0]),
        _fmt(cam[1, 1]),
        _fmt(cam[0, 2]),
        _fmt(cam[1, 2]),
    ]
    row += [_fmt(v) for v in sample.landmarks2d.reshape(-1)]
    row += [_fmt(v) for v in sample.landmarks3d.reshape(-1)]
    row += [_fmt(v) for v in sample.head.rotation.reshape(-1)]
    row += [_fmt(v) for v in sample.head.translation]
    row += [_fmt(v) for v in sample.gaze_target]
    if sample.screen is not None:
        row += [_fmt(v) for v in sample.screen.rotation.reshape(-1)]
        row += [_fmt(v) for v in sample.screen.translation]
        row += [_fmt(sample.screen.pixel_pitch[0]), _fmt(sample.screen.pixel_pitch[1])]
        row += [str(sample.screen.resolution[0]), str(sample.screen.resolution[1])]
        row += [_fmt(sample.on_screen_px[0]), _fmt(sample.on_screen_px[1])]
    else:
        row += [""] * 18
    return row


def write_manifest(path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for sample in samples:
            writer.writerow(sample_to_row(sample))


def _parse_floats(row: dict, names: list[str]) -> np.ndarray:
    return np.array([float(row[n]) for n in names])


def _row_to_sample(row: dict, base_dir: Path) -> Sample:
    person_id = int(row["person_id"])
    image_path = base_dir / row["image"]
    if not image_path.is_file():
        raise ManifestError(f"image file not found: {image_path}")
    try:
        with PILImage.open(image_path) as im:
            width, height = im.size
    except Exception as exc:
        raise ManifestError(f"unreadable image {image_path}: {exc}") from exc

    fx, fy, cx, cy = (float(row[k]) for k in ("fx", "fy", "cx", "cy"))
    camera = CameraModel(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]), width, height)
    lm2d = _parse_floats(row, [f"lm2d_{n}_{a}" for n in LANDMARK_NAMES for a in "xy"]).reshape(6, 2)
    lm3d = _parse_floats(row, [f"lm3d_{n}_{a}" for n in LANDMARK_NAMES for a in "xyz"]).reshape(6, 3)
    rot = _parse_floats(row, [f"head_r{i}{j}" for i in range(3) for j in range(3)]).reshape(3, 3)
    trans = _parse_floats(row, [f"head_t{a}" for a in "xyz"])
    head = HeadPose(rot, trans)
    gaze = _parse_floats(row, [f"gaze_{a}" for a in "xyz"])
    if not np.all(np.isfinite(gaze)):
        raise ManifestError("gaze target is not finite")

    screen = None
    on_screen = None
    if row.get("screen_r00", "") not in ("", None):
        srot = _parse_floats(row, [f"screen_r{i}{j}" for i in range(3) for j in range(3)]).reshape(3, 3)
        strans = _parse_floats(row, [f"screen_t{a}" for a in "xyz"])
        pitch = (float(row["screen_pitch_x"]), float(row["screen_pitch_y"]))
        res = (int(float(row["screen_res_x"])), int(float(row["screen_res_y"])))
        screen = ScreenPlane(srot, strans, pitch, res)
        on_screen = _parse_floats(row, ["on_screen_x", "on_screen_y"])
        ref = reference_point(lm3d)
        derived = intersect_screen(ref, unit(gaze - ref), screen, units="px")
        err = float(np.linalg.norm(derived - on_screen))
        if err > ON_SCREEN_TOL_PX:
            raise ManifestError(
                f"on-screen point inconsistent with gaze target by {err:.2f} px")

    return Sample(
        person_id=person_id,
        image_path=image_path,
        landmarks2d=lm2d,
        landmarks3d=lm3d,
        head=head,
        camera=camera,
        gaze_target=gaze,
        screen=screen,
        on_screen_px=on_screen,
    )


def load_manifest(path) -> list[Sample]:
    """Parse and validate a manifest; failures report the offending row."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    samples = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest (no header)")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        for i, row in enumerate(reader, start=1):
            try:
                samples.append(_row_to_sample(row, path.parent))
            except (ManifestError, GeometryError, ValueError) as exc:
                raise ManifestError(f"{path}: row {i}: {exc}") from exc
    return samples


def person_ids(samples) -> list[int]:
    return sorted({s.person_id for s in samples})


def make_splits(samples, scheme: str = "loocv", seed: int = 0, k: int = 5):
    """Person-disjoint cross-validation folds.

    Returns a list of (train_ids, test_ids) tuples.  ``samples`` may be a
    list of Sample objects or an iterable of person ids.
    """
    if samples and hasattr(next(iter(samples)), "person_id"):
        persons = person_ids(samples)
    else:
        persons = sorted(set(samples))
    if scheme == "loocv":
        if len(persons) < 2:
            raise ValueError("leave-one-person-out needs at least 2 persons")
        return [
            (tuple(p for p in persons if p != test), (test,))
            for test in persons
        ]
    if scheme == "kfold":
        if len(persons) < k:
            raise ValueError(f"k-fold with k={k} needs at least {k} persons")
        rng = np.random.default_rng(seed)
        order = [persons[i] for i in rng.permutation(len(persons))]
        groups = [sorted(g) for g in np.array_split(np.array(order), k)]
        folds = []
        for test in groups:
            test_ids = tuple(int(p) for p in test)
            train_ids = tuple(p for p in persons if p not in test_ids)
            folds.append((train_ids, test_ids))
        return folds
    raise ValueError(f"unknown split scheme {scheme!r}")
