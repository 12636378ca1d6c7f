"""Error metrics, cross-validation driver, head-pose baselines, occlusion
importance maps, and condition clustering."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import imaging
from .dataset import NormalizedSample, Sample, normalize_sample
from .geometry import (
    HeadPose,
    NormalizationSpace,
    ScreenPlane,
    angles_to_vector,
    check_unit,
    intersect_screen,
    normalize_gaze,
    unit,
    vector_to_angles,
)
from .network import ModelConfig, Network, TrainedModel, train


def angular_error(g1, g2) -> float:
    """Angle between two unit gaze vectors, in degrees."""
    g1 = check_unit(g1)
    g2 = check_unit(g2)
    return float(np.degrees(np.arccos(np.clip(g1 @ g2, -1.0, 1.0))))


def euclidean_error_2d(p1, p2) -> float:
    p1 = np.asarray(p1, dtype=float).reshape(2)
    p2 = np.asarray(p2, dtype=float).reshape(2)
    return float(np.linalg.norm(p1 - p2))


def gaze_errors_on_screen(origin, g_est, g_true, screen: ScreenPlane) -> float:
    """3D->2D conversion: Euclidean mm error between the screen intersections
    of the estimated and true gaze rays."""
    p_est = intersect_screen(origin, g_est, screen, units="mm")
    p_true = intersect_screen(origin, g_true, screen, units="mm")
    return euclidean_error_2d(p_est, p_true)


def screen_point_to_ray(point_mm, origin, screen: ScreenPlane) -> np.ndarray:
    """Back-project a 2D screen point (mm) to the unit ray from ``origin``."""
    point_mm = np.asarray(point_mm, dtype=float).reshape(2)
    world = screen.rotation @ np.array([point_mm[0], point_mm[1], 0.0]) + screen.translation
    return unit(world - np.asarray(origin, dtype=float))


def screen_error_as_angular(p_est_mm, p_true_mm, origin, screen: ScreenPlane) -> float:
    """2D->angular conversion: angle between the back-projected rays."""
    return angular_error(
        screen_point_to_ray(p_est_mm, origin, screen),
        screen_point_to_ray(p_true_mm, origin, screen),
    )


def headpose_as_gaze(head: HeadPose) -> np.ndarray:
    """Naive estimator: the head's forward axis as the gaze direction."""
    return head.rotation @ np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class HeadPoseRegression:
    """Affine map from head angles to gaze angles (least squares fit)."""

    matrix: np.ndarray  # (2, 2)
    offset: np.ndarray  # (2,)

    def apply(self, head_angles) -> np.ndarray:
        h = np.asarray(head_angles, dtype=float)
        return h @ self.matrix.T + self.offset


def fit_headpose_regression(pairs) -> HeadPoseRegression:
    """Least-squares affine fit on (head angles, gaze angles) pairs."""
    heads = np.asarray([np.asarray(h, dtype=float).reshape(2) for h, _ in pairs])
    gazes = np.asarray([np.asarray(g, dtype=float).reshape(2) for _, g in pairs])
    if len(heads) < 3:
        raise ValueError("need at least 3 training pairs")
    design = np.hstack([heads, np.ones((len(heads), 1))])
    if np.linalg.matrix_rank(design) < 3:
        raise ValueError("rank-deficient design: head poses do not span the plane")
    coeffs, *_ = np.linalg.lstsq(design, gazes, rcond=None)
    return HeadPoseRegression(matrix=coeffs[:2].T, offset=coeffs[2])


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

VARIANTS = ("face", "eyes_blocked", "single_eye")

# 2D-task targets are trained in units of 100 mm so their magnitude matches
# the angular task; metrics convert predictions back to mm
TARGET_SCALE_2D_MM = 100.0


@dataclass
class FoldResult:
    fold_id: int
    test_persons: tuple[int, ...]
    sample_ids: list[str]
    angular_deg: np.ndarray
    euclid_mm: np.ndarray | None  # None when no screen pose is available

    @property
    def mean_angular(self) -> float:
        return math.fsum(self.angular_deg) / len(self.angular_deg)

    @property
    def std_angular(self) -> float:
        return float(np.std(self.angular_deg))

    @property
    def mean_euclid(self) -> float | None:
        if self.euclid_mm is None:
            return None
        return math.fsum(self.euclid_mm) / len(self.euclid_mm)

    @property
    def std_euclid(self) -> float | None:
        if self.euclid_mm is None:
            return None
        return float(np.std(self.euclid_mm))


@dataclass
class PreparedData:
    """Model inputs/targets plus the per-sample context needed for metrics."""

    task: str
    variant: str
    inputs: np.ndarray  # (n, H, W)
    targets: np.ndarray  # (n, 2) normalized angles (3d) or screen mm (2d)
    persons: np.ndarray  # (n,)
    ids: list[str]
    samples: list[Sample]
    normalized: list[NormalizedSample] | None  # per-sample, 3d task only


def sample_id(sample: Sample) -> str:
    return f"{sample.person_id}/{sample.image_path.stem}"


def prepare_inputs(
    samples: list[Sample],
    space: NormalizationSpace,
    task: str = "3d",
    variant: str = "face",
    input_size: int | None = None,
) -> PreparedData:
    """Run the imaging pipeline for the chosen task/variant over all samples."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if task not in ("2d", "3d"):
        raise ValueError(f"task must be '2d' or '3d', got {task!r}")
    size = input_size or space.camera.width
    inputs = []
    targets = []
    normalized: list[NormalizedSample] | None = [] if task == "3d" else None
    for s in samples:
        raw = imaging.read_png(s.image_path)
        if task == "3d":
            reference = "left_eye" if variant == "single_eye" else "landmarks"
            ns = normalize_sample(s, space, image=raw, reference=reference)
            img = ns.image
            if variant == "eyes_blocked":
                img = imaging.block_eyes(img, ns.landmarks2d)
            elif variant == "single_eye":
                img = imaging.crop_eye(img, ns.landmarks2d[1], ns.landmarks2d[0], 1.5, (size, size))
            if img.shape != (size, size):
                raise ValueError(
                    f"normalized image {img.shape} does not match model input {size}")
            normalized.append(ns)
            targets.append(ns.gaze_angles)
        else:
            if s.screen is None or s.on_screen_px is None:
                raise ValueError(f"2d task needs screen annotations ({sample_id(s)})")
            gray = imaging.to_gray(raw)
            if variant == "eyes_blocked":
                gray = imaging.block_eyes(gray, s.landmarks2d)
            if variant == "single_eye":
                img = imaging.crop_eye(gray, s.landmarks2d[1], s.landmarks2d[0], 1.5, (size, size))
            else:
                img = imaging.crop_face(gray, s.landmarks2d, 1.5, (size, size))
            targets.append(s.on_screen_px * np.asarray(s.screen.pixel_pitch) / TARGET_SCALE_2D_MM)
        inputs.append(img)
    return PreparedData(
        task=task,
        variant=variant,
        inputs=np.stack(inputs),
        targets=np.stack(targets),
        persons=np.array([s.person_id for s in samples]),
        ids=[sample_id(s) for s in samples],
        samples=samples,
        normalized=normalized,
    )


def fold_seed(base_seed: int, fold_id: int) -> int:
    return int((base_seed * 1_000_003 + fold_id) % (2**31 - 1))


def _errors_for_predictions(prep: PreparedData, idx: np.ndarray, preds: np.ndarray):
    """Per-sample angular (deg) and on-screen Euclidean (mm) errors."""
    angular = np.empty(len(idx))
    euclid = np.empty(len(idx))
    have_euclid = True
    for j, i in enumerate(idx):
        s = prep.samples[i]
        if prep.task == "3d":
            ns = prep.normalized[i]
            g_est = normalize_gaze(ns.transform, angles_to_vector(preds[j]), "inverse")
            g_true = unit(s.gaze_target - ns.reference)
            angular[j] = angular_error(g_est, g_true)
            if s.screen is not None:
                euclid[j] = gaze_errors_on_screen(ns.reference, g_est, g_true, s.screen)
            else:
                have_euclid = False
        else:
            p_true = prep.targets[i] * TARGET_SCALE_2D_MM
            p_est = preds[j] * TARGET_SCALE_2D_MM
            euclid[j] = euclidean_error_2d(p_est, p_true)
            ref = s.landmarks3d.mean(axis=0)
            angular[j] = screen_error_as_angular(p_est, p_true, ref, s.screen)
    return angular, (euclid if have_euclid else None)


def evaluate_fold(
    prep: PreparedData,
    config: ModelConfig,
    fold_id: int,
    train_ids,
    test_ids,
) -> tuple[FoldResult, TrainedModel]:
    train_idx = np.flatnonzero(np.isin(prep.persons, train_ids))
    test_idx = np.flatnonzero(np.isin(prep.persons, test_ids))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError(f"fold {fold_id}: empty train or test set")
    assert not set(prep.persons[train_idx]) & set(prep.persons[test_idx])
    cfg = replace(config, seed=fold_seed(config.seed, fold_id))
    try:
        model = train(cfg, (prep.inputs[train_idx][:, None], prep.targets[train_idx]))
        preds = model.network().predict(prep.inputs[test_idx][:, None])
        angular, euclid = _errors_for_predictions(prep, test_idx, preds)
    except Exception as exc:
        raise RuntimeError(f"fold {fold_id} failed: {exc}") from exc
    result = FoldResult(
        fold_id=fold_id,
        test_persons=tuple(int(p) for p in test_ids),
        sample_ids=[prep.ids[i] for i in test_idx],
        angular_deg=angular,
        euclid_mm=euclid,
    )
    return result, model


def run_crossvalidation(
    prep: PreparedData,
    splits,
    config: ModelConfig,
    jobs: int = 1,
) -> list[FoldResult]:
    """Train and evaluate every fold; results are identical for any ``jobs``."""
    def run(args):
        fold_id, (train_ids, test_ids) = args
        result, _ = evaluate_fold(prep, config, fold_id, train_ids, test_ids)
        return result

    tasks = list(enumerate(splits))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    return sorted(results, key=lambda r: r.fold_id)


def summarize_folds(results: list[FoldResult]) -> dict:
    mean_angular = math.fsum(r.mean_angular for r in results) / len(results)
    euclids = [r.mean_euclid for r in results if r.mean_euclid is not None]
    return {
        "folds": len(results),
        "mean_angular_deg": mean_angular,
        "mean_euclid_mm": (math.fsum(euclids) / len(euclids)) if euclids else None,
    }


def constant_predictor_errors(prep: PreparedData, splits) -> list[FoldResult]:
    """Baseline that always predicts the training set's mean target."""
    results = []
    for fold_id, (train_ids, test_ids) in enumerate(splits):
        train_idx = np.flatnonzero(np.isin(prep.persons, train_ids))
        test_idx = np.flatnonzero(np.isin(prep.persons, test_ids))
        mean_target = prep.targets[train_idx].mean(axis=0)
        preds = np.tile(mean_target, (len(test_idx), 1))
        angular, euclid = _errors_for_predictions(prep, test_idx, preds)
        results.append(FoldResult(fold_id, tuple(int(p) for p in test_ids),
                                  [prep.ids[i] for i in test_idx], angular, euclid))
    return results


def headpose_baseline_errors(prep: PreparedData, splits) -> dict[str, list[FoldResult]]:
    """Per-fold errors of the two head-pose baselines on the 3D task:
    the head forward axis taken as gaze, and an affine regression from head
    angles to gaze angles fitted on the training persons."""
    if prep.task != "3d" or prep.normalized is None:
        raise ValueError("head-pose baselines require 3d-task prepared data")
    naive_results = []
    reg_results = []
    for fold_id, (train_ids, test_ids) in enumerate(splits):
        train_idx = np.flatnonzero(np.isin(prep.persons, train_ids))
        test_idx = np.flatnonzero(np.isin(prep.persons, test_ids))
        pairs = [
            (prep.normalized[i].head_angles, prep.normalized[i].gaze_angles)
            for i in train_idx
        ]
        reg = fit_headpose_regression(pairs)

        naive_ang = np.empty(len(test_idx))
        reg_ang = np.empty(len(test_idx))
        for j, i in enumerate(test_idx):
            s = prep.samples[i]
            ns = prep.normalized[i]
            g_true = unit(s.gaze_target - ns.reference)
            naive_ang[j] = angular_error(headpose_as_gaze(s.head), g_true)
            pred_angles = reg.apply(ns.head_angles)
            g_est = normalize_gaze(ns.transform, angles_to_vector(pred_angles), "inverse")
            reg_ang[j] = angular_error(g_est, g_true)
        ids = [prep.ids[i] for i in test_idx]
        test = tuple(int(p) for p in test_ids)
        naive_results.append(FoldResult(fold_id, test, ids, naive_ang, None))
        reg_results.append(FoldResult(fold_id, test, ids, reg_ang, None))
    return {"headpose_naive": naive_results, "headpose_regression": reg_results}


# ---------------------------------------------------------------------------
# occlusion importance
# ---------------------------------------------------------------------------

@dataclass
class ImportanceMap:
    """Error increase (degrees) per occluder position, plus the same grid
    upsampled to image size and box-filtered."""

    grid: np.ndarray  # (ny, nx) raw error deltas
    values: np.ndarray  # (H, W) smoothed map
    mask_size: int
    stride: int
    base_error: float
    landmarks2d: np.ndarray | None = None  # alignment landmarks, image space


def occlusion_grid_positions(extent: int, mask_size: int, stride: int) -> list[int]:
    n = math.ceil((extent - mask_size) / stride) + 1
    return [i * stride for i in range(n)]


def scaled_mask_params(size: int, mask_size: int | None, stride: int | None):
    """Occluder geometry for a given image size; the 448-px reference uses a
    64-px mask with a 32-px stride, scaled proportionally otherwise."""
    if mask_size is None:
        mask_size = max(1, size * 64 // 448)
    if stride is None:
        stride = max(1, size * 32 // 448)
    return mask_size, stride


def occlusion_importance(
    predict_fn,
    image: np.ndarray,
    true_angles,
    mask_size: int | None = None,
    stride: int | None = None,
    mask_value: float = 0.5,
    landmarks2d=None,
    smooth: bool = True,
) -> ImportanceMap:
    """Slide a gray occluder over the image and record the error increase.

    ``predict_fn`` maps a batch of images (B, H, W) to angles (B, 2); the
    error is the angular difference to ``true_angles``.  Negative deltas
    (occlusion helped) are kept.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    mask_size, stride = scaled_mask_params(min(h, w), mask_size, stride)
    if mask_size > h or mask_size > w:
        raise ValueError(f"mask size {mask_size} exceeds image {w}x{h}")
    true_vec = angles_to_vector(true_angles)

    ys = occlusion_grid_positions(h, mask_size, stride)
    xs = occlusion_grid_positions(w, mask_size, stride)
    batch = np.repeat(image[None], len(ys) * len(xs), axis=0)
    pos = 0
    for y in ys:
        for x in xs:
            batch[pos, y:min(y + mask_size, h), x:min(x + mask_size, w)] = mask_value
            pos += 1

    base_pred = predict_fn(image[None])[0]
    base_err = angular_error(angles_to_vector(base_pred), true_vec)
    preds = predict_fn(batch)
    grid = np.empty((len(ys), len(xs)))
    pos = 0
    for i in range(len(ys)):
        for j in range(len(xs)):
            err = angular_error(angles_to_vector(preds[pos]), true_vec)
            grid[i, j] = err - base_err
            pos += 1

    # nearest-cell upsampling, then box smoothing
    py = np.clip(np.rint((np.arange(h) - mask_size / 2.0) / stride), 0, len(ys) - 1).astype(int)
    px = np.clip(np.rint((np.arange(w) - mask_size / 2.0) / stride), 0, len(xs) - 1).astype(int)
    values = grid[py[:, None], px[None, :]]
    if smooth and stride >= 2:
        values = imaging.box_filter(values, stride // 2)
    lm = None if landmarks2d is None else np.asarray(landmarks2d, dtype=float)
    return ImportanceMap(grid=grid, values=values, mask_size=mask_size,
                         stride=stride, base_error=base_err, landmarks2d=lm)


# ---------------------------------------------------------------------------
# 1D k-means and cluster averaging
# ---------------------------------------------------------------------------

CLUSTER_FEATURES = ("illumination_diff", "gaze_yaw", "gaze_pitch", "head_yaw", "head_pitch")


@dataclass(frozen=True)
class ClusterSpec:
    feature: str
    k: int = 3
    seed: int = 0
    restarts: int = 16
    max_iter: int = 100

    def __post_init__(self):
        if self.feature not in CLUSTER_FEATURES:
            raise ValueError(f"feature must be one of {CLUSTER_FEATURES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    objective_history: list[float]  # per Lloyd iteration of the winning run


def _lloyd_run(values: np.ndarray, k: int, rng: np.random.Generator, max_iter: int):
    n = len(values)
    centroids = values[rng.choice(n, size=k, replace=False)].astype(float)
    labels = np.zeros(n, dtype=int)
    history = []
    prev_obj = np.inf
    for _ in range(max_iter):
        dists = (values[:, None] - centroids[None, :]) ** 2
        new_labels = dists.argmin(axis=1)
        for c in range(k):
            members = values[new_labels == c]
            if len(members):
                centroids[c] = members.mean()
            # empty cluster: centroid collapses (keeps its previous value)
        obj = float(((values - centroids[new_labels]) ** 2).sum())
        assert obj <= prev_obj + 1e-9 * max(1.0, abs(prev_obj)), \
            "Lloyd objective increased"
        history.append(obj)
        if np.array_equal(new_labels, labels) and len(history) > 1:
            break
        labels = new_labels
        prev_obj = obj
    return labels, centroids, history[-1], history


def kmeans_1d(values, k: int, seed: int = 0, restarts: int = 16, max_iter: int = 100) -> KMeansResult:
    """Seeded Lloyd iterations on scalars; best of ``restarts`` random
    initializations.  The within-cluster objective is asserted non-increasing
    across iterations of every run."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if k > len(values):
        raise ValueError(f"k={k} exceeds the number of points ({len(values)})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        labels, centroids, obj, history = _lloyd_run(values, k, rng, max_iter)
        if best is None or obj < best.objective - 1e-12:
            best = KMeansResult(labels, centroids.copy(), obj, history)
    return best


@dataclass
class AnalysisSample:
    """Per-sample payload for cluster averaging."""

    image: np.ndarray  # face image, normalized space
    landmarks2d: np.ndarray  # (6, 2) in that image
    gaze_angles: np.ndarray
    head_angles: np.ndarray
    errors: tuple[float, float]  # angular errors (deg) of two estimators


@dataclass
class ClusterSummary:
    centroid: float
    count: int
    mean_face: np.ndarray | None
    mean_map: np.ndarray | None
    mean_errors: np.ndarray | None
    member_indices: list[int]


def feature_values(samples: list[AnalysisSample], feature: str) -> np.ndarray:
    if feature == "illumination_diff":
        return np.array([imaging.half_intensity_diff(s.image) for s in samples])
    if feature == "gaze_yaw":
        return np.array([s.gaze_angles[0] for s in samples])
    if feature == "gaze_pitch":
        return np.array([s.gaze_angles[1] for s in samples])
    if feature == "head_yaw":
        return np.array([s.head_angles[0] for s in samples])
    if feature == "head_pitch":
        return np.array([s.head_angles[1] for s in samples])
    raise ValueError(f"unknown feature {feature!r}")


def alignment_triangle(landmarks2d: np.ndarray) -> np.ndarray:
    """Three alignment points: centers of each eye's corners and of the
    mouth corners."""
    lm = np.asarray(landmarks2d, dtype=float)
    return np.stack([
        lm[0:2].mean(axis=0),
        lm[2:4].mean(axis=0),
        lm[4:6].mean(axis=0),
    ])


def cluster_and_average(
    maps: list[ImportanceMap],
    samples: list[AnalysisSample],
    spec: ClusterSpec,
) -> tuple[list[ClusterSummary], KMeansResult]:
    """Cluster samples on a scalar condition, align faces and maps to the
    mean landmark triangle, and average per cluster (sorted by centroid)."""
    if len(maps) != len(samples):
        raise ValueError("maps and samples must align")
    if spec.k > len(samples):
        raise ValueError(f"k={spec.k} exceeds sample count {len(samples)}")
    values = feature_values(samples, spec.feature)
    km = kmeans_1d(values, spec.k, seed=spec.seed, restarts=spec.restarts,
                   max_iter=spec.max_iter)

    tris = np.stack([alignment_triangle(s.landmarks2d) for s in samples])
    mean_tri = tris.mean(axis=0)
    h, w = samples[0].image.shape
    aligned_faces = []
    aligned_maps = []
    for s, m in zip(samples, maps):
        a = imaging.affine_from_3pts(alignment_triangle(s.landmarks2d), mean_tri)
        aligned_faces.append(imaging.warp_affine(s.image, a, (w, h)))
        aligned_maps.append(imaging.warp_affine(m.values, a, (w, h)))

    order = np.argsort(km.centroids, kind="stable")
    summaries = []
    for c in order:
        members = [i for i in range(len(samples)) if km.labels[i] == c]
        if members:
            face = np.mean([aligned_faces[i] for i in members], axis=0)
            amap = np.mean([aligned_maps[i] for i in members], axis=0)
            errs = np.array([
                math.fsum(samples[i].errors[0] for i in members) / len(members),
                math.fsum(samples[i].errors[1] for i in members) / len(members),
            ])
        else:
            face = amap = errs = None
        summaries.append(ClusterSummary(
            centroid=float(km.centroids[c]),
            count=len(members),
            mean_face=face,
            mean_map=amap,
            mean_errors=errs,
            member_indices=members,
        ))
    return summaries, km
