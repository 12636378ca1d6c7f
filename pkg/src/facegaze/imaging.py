"""Image-space operations: warps, crop rules, face grid, filters, image I/O.

Images are numpy float arrays with values in [0, 1], shaped (H, W) for
grayscale or (H, W, 3) for RGB.  Pixel centers sit at integer coordinates,
so a homography maps output pixel (u, v) directly to source coordinates;
samples outside the source raster read as zero.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

GRID_SIZE = 25
EYE_ASPECT = 36.0 / 60.0  # height/width of the standard single-eye patch


def validate_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"image must be (H, W) or (H, W, 3), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixels")
    return img


def to_gray(img) -> np.ndarray:
    """RGB -> grayscale by channel mean; grayscale passes through."""
    img = validate_image(img)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample img at real coordinates; out-of-bounds contributions are zero."""
    h, w = img.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    chans = img if img.ndim == 3 else img[:, :, None]
    out = np.zeros(xs.shape + (chans.shape[2],), dtype=float)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            vals = chans[yi_c, xi_c] * inside[..., None]
            out += weight[..., None] * vals
    return out[..., 0] if img.ndim == 2 else out


def _warp_by_inverse_map(img: np.ndarray, hinv: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    out_w, out_h = out_size
    us, vs = np.meshgrid(np.arange(out_w, dtype=float), np.arange(out_h, dtype=float))
    denom = hinv[2, 0] * us + hinv[2, 1] * vs + hinv[2, 2]
    bad = np.abs(denom) < 1e-12
    denom = np.where(bad, 1.0, denom)
    xs = (hinv[0, 0] * us + hinv[0, 1] * vs + hinv[0, 2]) / denom
    ys = (hinv[1, 0] * us + hinv[1, 1] * vs + hinv[1, 2]) / denom
    # points at infinity sample nothing
    xs = np.where(bad, -1e12, xs)
    ys = np.where(bad, -1e12, ys)
    return _bilinear_sample(img, xs, ys)


def warp_perspective(img, h, out_size: tuple[int, int]) -> np.ndarray:
    """Warp by a homography mapping source pixels to output pixels.

    Output pixel (u, v) is the bilinear sample of the source at
    h^-1 @ (u, v, 1).
    """
    img = validate_image(img)
    h = np.asarray(h, dtype=float)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    if abs(np.linalg.det(h)) < 1e-12:
        raise ValueError("homography is singular")
    return _warp_by_inverse_map(img, np.linalg.inv(h), out_size)


def warp_affine(img, a, out_size: tuple[int, int]) -> np.ndarray:
    """warp_perspective for a 2x3 affine map (source -> output)."""
    a = np.asarray(a, dtype=float)
    if a.shape != (2, 3):
        raise ValueError(f"affine map must be 2x3, got {a.shape}")
    h = np.vstack([a, [0.0, 0.0, 1.0]])
    return warp_perspective(img, h, out_size)


def affine_from_3pts(src, dst) -> np.ndarray:
    """Unique 2x3 affine map sending three source points to three targets."""
    src = np.asarray(src, dtype=float).reshape(3, 2)
    dst = np.asarray(dst, dtype=float).reshape(3, 2)
    e1 = src[1] - src[0]
    e2 = src[2] - src[0]
    area2 = e1[0] * e2[1] - e1[1] * e2[0]
    span = np.abs(src - src.mean(axis=0)).max() + 1.0
    if abs(area2) < 1e-9 * span * span:
        raise ValueError("source points are collinear")
    design = np.hstack([src, np.ones((3, 1))])
    coeffs = np.linalg.solve(design, dst)  # (3, 2)
    return coeffs.T


def validate_landmarks2d(lm) -> np.ndarray:
    lm = np.asarray(lm, dtype=float)
    if lm.shape != (6, 2):
        raise ValueError(f"expected six 2D landmarks with shape (6, 2), got {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise ValueError("landmarks contain non-finite entries")
    return lm


def _resample_rect(img: np.ndarray, center, size_xy, out_size: tuple[int, int]) -> np.ndarray:
    """Resample an axis-aligned source rectangle to out_size (zero-padded).

    The rectangle spans center +/- size/2 in pixel-center coordinates; it is
    partitioned into out_size equal cells sampled at their midpoints, so
    output pixel u reads source x = x0 + (u + 0.5) * size_x / out_w.
    """
    out_w, out_h = out_size
    cx, cy = center
    sx, sy = size_xy
    step_x = sx / out_w
    step_y = sy / out_h
    a = np.array(
        [
            [step_x, 0.0, cx - sx / 2.0 + 0.5 * step_x],
            [0.0, step_y, cy - sy / 2.0 + 0.5 * step_y],
            [0.0, 0.0, 1.0],
        ]
    )
    return _warp_by_inverse_map(img, a, out_size)


def crop_face(img, lm, scale: float = 1.5, out_size: tuple[int, int] = (448, 448)) -> np.ndarray:
    """Square face crop: centered on the landmark centroid, side equal to
    ``scale`` times the maximum pairwise landmark distance."""
    img = validate_image(img)
    lm = validate_landmarks2d(lm)
    diffs = lm[:, None, :] - lm[None, :, :]
    max_dist = np.sqrt((diffs**2).sum(axis=2)).max()
    if max_dist < 1e-9:
        raise ValueError("landmarks are coincident; face crop is undefined")
    side = scale * max_dist
    center = lm.mean(axis=0)
    return _resample_rect(img, center, (side, side), out_size)


def crop_eye(img, inner, outer, factor: float, out_size: tuple[int, int]) -> np.ndarray:
    """Eye crop: centered between the corners, width = factor * corner
    distance, height follows the output aspect ratio."""
    img = validate_image(img)
    inner = np.asarray(inner, dtype=float).reshape(2)
    outer = np.asarray(outer, dtype=float).reshape(2)
    dist = np.linalg.norm(inner - outer)
    if dist < 1e-9:
        raise ValueError("eye corners are coincident")
    out_w, out_h = out_size
    width = factor * dist
    height = width * out_h / out_w
    center = (inner + outer) / 2.0
    return _resample_rect(img, center, (width, height), out_size)


def face_grid(frame: tuple[int, int], face_bbox, grid: int = GRID_SIZE) -> np.ndarray:
    """Binary occupancy grid: cell is 1 iff its center lies inside the bbox.

    ``face_bbox`` is (x0, y0, x1, y1) in frame pixels; containment is
    inclusive on all edges.
    """
    frame_w, frame_h = frame
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError("frame size must be positive")
    x0, y0, x1, y1 = (float(v) for v in face_bbox)
    cx = (np.arange(grid) + 0.5) * frame_w / grid
    cy = (np.arange(grid) + 0.5) * frame_h / grid
    in_x = (cx >= x0) & (cx <= x1)
    in_y = (cy >= y0) & (cy <= y1)
    return (in_y[:, None] & in_x[None, :]).astype(np.uint8)


def eye_block_rect(inner, outer, factor: float = 1.5) -> tuple[float, float, float, float]:
    """Axis-aligned rectangle covering one eye (same geometry as the
    standard single-eye crop): returns (x0, y0, x1, y1)."""
    inner = np.asarray(inner, dtype=float).reshape(2)
    outer = np.asarray(outer, dtype=float).reshape(2)
    center = (inner + outer) / 2.0
    width = factor * np.linalg.norm(inner - outer)
    height = width * EYE_ASPECT
    return (center[0] - width / 2.0, center[1] - height / 2.0,
            center[0] + width / 2.0, center[1] + height / 2.0)


def block_eyes(img, lm, gray: float = 0.5) -> np.ndarray:
    """Fill both eye rectangles with a constant gray; other pixels unchanged.

    A pixel is blocked when its center lies in the half-open rectangle
    [x0, x1) x [y0, y1), so a width-60 rectangle covers exactly 60 columns.
    """
    img = validate_image(img).copy()
    lm = validate_landmarks2d(lm)
    h, w = img.shape[:2]
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)
    for inner, outer in ((lm[1], lm[0]), (lm[2], lm[3])):
        x0, y0, x1, y1 = eye_block_rect(inner, outer)
        col = (xs >= x0) & (xs < x1)
        row = (ys >= y0) & (ys < y1)
        mask = row[:, None] & col[None, :]
        img[mask] = gray
    return img


def box_filter(values, radius: int) -> np.ndarray:
    """Mean filter with window (2r+1)^2, clipped (renormalized) at borders."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError(f"box_filter expects a 2D array, got shape {values.shape}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return values.copy()
    h, w = values.shape
    # summed-area table with a leading zero row/column
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    i = np.arange(h)
    j = np.arange(w)
    top = np.clip(i - radius, 0, h)[:, None]
    bot = np.clip(i + radius + 1, 0, h)[:, None]
    left = np.clip(j - radius, 0, w)[None, :]
    right = np.clip(j + radius + 1, 0, w)[None, :]
    total = sat[bot, right] - sat[top, right] - sat[bot, left] + sat[top, left]
    count = (bot - top) * (right - left)
    return total / count


def half_intensity_diff(img) -> float:
    """Mean intensity of the right half minus the left half.

    Halves are width // 2 columns; for odd widths the center column is
    excluded.
    """
    gray = to_gray(img)
    w = gray.shape[1]
    half = w // 2
    if half == 0:
        return 0.0
    left = gray[:, :half]
    right = gray[:, w - half:]
    return float(right.mean() - left.mean())


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float [0, 1]; grayscale (H, W) or RGB (H, W, 3)."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(float) / 255.0


def write_png(path, img) -> None:
    img = validate_image(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    mode = "RGB" if data.ndim == 3 else "L"
    PILImage.fromarray(data, mode=mode).save(path, format="PNG")


def write_pgm(path, values) -> None:
    """Write a float [0, 1] map as binary 8-bit PGM (P5)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("PGM output requires a 2D array")
    data = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(float) / 255.0
