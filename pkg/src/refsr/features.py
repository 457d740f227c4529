"""Keypoint detection, 144-dim description, matching, and homography estimation.

The detector is a multi-scale Harris corner detector over a 3-level
half-octave pyramid. Descriptors pool gradient orientations into a
4x4 spatial grid with 9 orientation bins (144 values), L2-normalized and
clipped, which makes them invariant to additive intensity shifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import ImagePlane, gaussian_blur, gradient_arrays, resize_bicubic, sample_bicubic

HARRIS_K = 0.05
HARRIS_THRESHOLD = 1e-8
PYRAMID_LEVELS = 3
DESC_CELLS = 4
DESC_ORI_BINS = 9
DESC_LEN = DESC_CELLS * DESC_CELLS * DESC_ORI_BINS


class EstimationError(RuntimeError):
    """Homography estimation failed (degenerate or insufficient data)."""


class AlignmentError(RuntimeError):
    """No acceptable registration between reference and target."""


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass
class Correspondence:
    src: tuple[float, float]  # point in the reference image
    dst: tuple[float, float]  # point in the target image
    match_score: float


@dataclass
class Homography:
    """3x3 projective transform, normalized so h[2,2] == 1."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(m[2, 2]) < 1e-12:
            raise ValueError("homography has vanishing scale entry")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        self.h = m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map an (n, 2) array of points through the transform."""
        pts = np.asarray(pts, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        proj = np.hstack([pts, ones]) @ self.h.T
        return proj[:, :2] / proj[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))


# ----------------------------------------------------------------------
# Detection
# ----------------------------------------------------------------------


def _harris_response(data: np.ndarray) -> np.ndarray:
    smoothed = gaussian_blur(ImagePlane(data), 1.0)
    gx, gy = gradient_arrays(smoothed.data)
    ixx = gaussian_blur(ImagePlane(gx * gx), 1.6).data
    iyy = gaussian_blur(ImagePlane(gy * gy), 1.6).data
    ixy = gaussian_blur(ImagePlane(gx * gy), 1.6).data
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    return det - HARRIS_K * trace * trace


def _dominant_orientation(gx, gy, cx, cy, radius):
    """Peak of a Gaussian-weighted 36-bin gradient orientation histogram."""
    h, w = gx.shape
    x0, x1 = max(0, int(cx - radius)), min(w, int(cx + radius) + 1)
    y0, y1 = max(0, int(cy - radius)), min(h, int(cy + radius) + 1)
    sub_x = gx[y0:y1, x0:x1]
    sub_y = gy[y0:y1, x0:x1]
    yy, xx = np.mgrid[y0:y1, x0:x1]
    weight = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * (radius / 2.0) ** 2))
    mag = np.hypot(sub_x, sub_y) * weight
    ang = np.arctan2(sub_y, sub_x) % (2.0 * math.pi)
    bins = 36
    hist = np.zeros(bins)
    idx = np.minimum((ang / (2.0 * math.pi) * bins).astype(int), bins - 1)
    np.add.at(hist, idx, mag)
    # circular smoothing stabilizes the peak
    hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = int(np.argmax(hist))
    left, mid, right = hist[(peak - 1) % bins], hist[peak], hist[(peak + 1) % bins]
    denom = left - 2.0 * mid + right
    offset = 0.0 if abs(denom) < 1e-12 else 0.5 * (left - right) / denom
    return ((peak + 0.5 + offset) / bins * 2.0 * math.pi) % (2.0 * math.pi)


def detect_keypoints(img: ImagePlane, max_count: int = 500) -> list[Keypoint]:
    """Multi-scale Harris corners, strongest first.

    Raises ValueError for images smaller than 32x32. A constant image has
    zero response everywhere and yields an empty list.
    """
    if img.width < 32 or img.height < 32:
        raise ValueError(f"image {img.shape} too small for detection (need 32x32)")
    gx_base, gy_base = gradient_arrays(img.data)
    found = []
    level_img = img
    for level in range(PYRAMID_LEVELS):
        factor = 2.0 ** (level / 2.0)
        if level > 0:
            nw = max(8, int(round(img.width / factor)))
            nh = max(8, int(round(img.height / factor)))
            level_img = resize_bicubic(img, nw, nh)
        resp = _harris_response(level_img.data)
        h, w = resp.shape
        interior = resp[1 : h - 1, 1 : w - 1]
        # 3x3 non-max suppression
        is_max = np.ones_like(interior, dtype=bool)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                is_max &= interior >= resp[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        ys, xs = np.nonzero(is_max & (interior > HARRIS_THRESHOLD))
        for y, x in zip(ys + 1, xs + 1):
            r = resp[y, x]
            # parabolic sub-pixel refinement per axis
            dx_off = _parabolic(resp[y, x - 1], r, resp[y, x + 1])
            dy_off = _parabolic(resp[y - 1, x], r, resp[y + 1, x])
            bx = (x + dx_off + 0.5) * factor - 0.5
            by = (y + dy_off + 0.5) * factor - 0.5
            if not (0 <= bx <= img.width - 1 and 0 <= by <= img.height - 1):
                continue
            ori = _dominant_orientation(gx_base, gy_base, bx, by, radius=int(6 * factor))
            found.append(Keypoint(bx, by, factor, ori, float(r)))
    found.sort(key=lambda k: (-k.response, k.y, k.x))
    return found[:max_count]


def _parabolic(left, mid, right):
    denom = left - 2.0 * mid + right
    if abs(denom) < 1e-20:
        return 0.0
    off = 0.5 * (left - right) / denom
    return float(np.clip(off, -0.5, 0.5))


# ----------------------------------------------------------------------
# Description
# ----------------------------------------------------------------------


def describe(img: ImagePlane, kp: Keypoint) -> np.ndarray | None:
    """144-dim gradient histogram descriptor; None for flat patches."""
    gx, gy = gradient_arrays(img.data)
    return _describe_from_gradients(gx, gy, kp)


def describe_keypoints(img: ImagePlane, kps: list[Keypoint]):
    """Describe many keypoints, dropping flat ones.

    Returns (descriptors, surviving keypoints) with rows aligned.
    """
    gx, gy = gradient_arrays(img.data)
    descs, kept = [], []
    for kp in kps:
        d = _describe_from_gradients(gx, gy, kp)
        if d is not None:
            descs.append(d)
            kept.append(kp)
    if not descs:
        return np.zeros((0, DESC_LEN)), []
    return np.vstack(descs), kept


def detect_and_describe(img: ImagePlane, max_count: int = 500):
    kps = detect_keypoints(img, max_count)
    return describe_keypoints(img, kps)


def _describe_from_gradients(gx, gy, kp: Keypoint) -> np.ndarray | None:
    n = 16  # sample grid edge; spacing follows keypoint scale
    cos_t, sin_t = math.cos(kp.orientation), math.sin(kp.orientation)
    offs = (np.arange(n) - (n - 1) / 2.0) * kp.scale
    du, dv = np.meshgrid(offs, offs)
    xs = kp.x + cos_t * du - sin_t * dv
    ys = kp.y + sin_t * du + cos_t * dv
    sgx = _bilinear(gx, xs, ys)
    sgy = _bilinear(gy, xs, ys)
    # rotate gradients into the keypoint frame
    rgx = cos_t * sgx + sin_t * sgy
    rgy = -sin_t * sgx + cos_t * sgy
    mag = np.hypot(rgx, rgy)
    ang = np.arctan2(rgy, rgx) % (2.0 * math.pi)
    sigma = n / 2.0
    gauss = np.exp(-(du**2 + dv**2) / (2.0 * (sigma * kp.scale) ** 2))
    mag = mag * gauss

    cell = (np.arange(n) + 0.5) / (n / DESC_CELLS) - 0.5  # cell coordinates
    cu, cv = np.meshgrid(cell, cell)
    obin = ang / (2.0 * math.pi) * DESC_ORI_BINS

    hist = np.zeros((DESC_CELLS, DESC_CELLS, DESC_ORI_BINS))
    cu0 = np.floor(cu).astype(int)
    cv0 = np.floor(cv).astype(int)
    fu = cu - cu0
    fv = cv - cv0
    ob0 = np.floor(obin).astype(int) % DESC_ORI_BINS
    fo = obin - np.floor(obin)
    for dv_i, wv in ((0, 1.0 - fv), (1, fv)):
        rows = cv0 + dv_i
        row_ok = (rows >= 0) & (rows < DESC_CELLS)
        for du_i, wu in ((0, 1.0 - fu), (1, fu)):
            cols = cu0 + du_i
            ok = row_ok & (cols >= 0) & (cols < DESC_CELLS)
            if not ok.any():
                continue
            for do_i, wo in ((0, 1.0 - fo), (1, fo)):
                obins = (ob0 + do_i) % DESC_ORI_BINS
                w = mag * wv * wu * wo
                np.add.at(
                    hist,
                    (rows[ok], cols[ok], obins[ok]),
                    w[ok],
                )
    vec = hist.reshape(-1)
    norm = np.linalg.norm(vec)
    if norm < 1e-10:
        return None
    vec = np.minimum(vec / norm, 0.2)
    norm = np.linalg.norm(vec)
    if norm < 1e-10:
        return None
    return vec / norm


def _bilinear(data, xs, ys):
    h, w = data.shape
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return top * (1 - fy) + bot * fy


# ----------------------------------------------------------------------
# Matching
# ----------------------------------------------------------------------


def match_descriptors(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    kps_a: list[Keypoint],
    kps_b: list[Keypoint],
    ratio: float = 0.8,
) -> list[Correspondence]:
    """Ratio-test matching from a (reference) into b (target), one-to-one.

    Each a-descriptor keeps its nearest b-neighbor when the distance ratio
    to the second-nearest stays below `ratio`; collisions on a b-index keep
    the closest candidate.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    if len(desc_b) < 2 or len(desc_a) == 0:
        return []
    d2 = (
        np.sum(desc_a**2, axis=1)[:, None]
        + np.sum(desc_b**2, axis=1)[None, :]
        - 2.0 * desc_a @ desc_b.T
    )
    np.maximum(d2, 0.0, out=d2)
    order = np.argsort(d2, axis=1, kind="stable")
    best = order[:, 0]
    second = order[:, 1]
    d1 = np.sqrt(d2[np.arange(len(desc_a)), best])
    d2nd = np.sqrt(d2[np.arange(len(desc_a)), second])
    chosen: dict[int, tuple[float, int]] = {}
    for i in range(len(desc_a)):
        if d2nd[i] <= 1e-12 or d1[i] / d2nd[i] >= ratio:
            continue
        j = int(best[i])
        score = float(d1[i])
        if j not in chosen or score < chosen[j][0]:
            chosen[j] = (score, i)
    corrs = []
    for j in sorted(chosen):
        score, i = chosen[j]
        corrs.append(
            Correspondence(
                src=(kps_a[i].x, kps_a[i].y),
                dst=(kps_b[j].x, kps_b[j].y),
                match_score=score,
            )
        )
    return corrs


# ----------------------------------------------------------------------
# Homography estimation
# ----------------------------------------------------------------------


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    mean_dist = np.mean(np.linalg.norm(shifted, axis=1))
    scale = math.sqrt(2.0) / max(mean_dist, 1e-12)
    t = np.array(
        [[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1]]
    )
    return shifted * scale, t


def dlt_homography(corrs: list[Correspondence]) -> Homography:
    """Least-squares homography via the normalized direct linear transform."""
    if len(corrs) < 4:
        raise EstimationError(f"need at least 4 correspondences, got {len(corrs)}")
    src = np.array([c.src for c in corrs], dtype=np.float64)
    dst = np.array([c.dst for c in corrs], dtype=np.float64)
    src_n, t_src = _normalize_points(src)
    dst_n, t_dst = _normalize_points(dst)
    n = len(corrs)
    a = np.zeros((2 * n, 9))
    for i in range(n):
        x, y = src_n[i]
        u, v = dst_n[i]
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, s, vt = np.linalg.svd(a)
    if s[0] <= 0 or s[-2] / s[0] < 1e-12:
        raise EstimationError("degenerate correspondence configuration")
    h_n = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_n @ t_src
    if abs(h[2, 2]) < 1e-12:
        raise EstimationError("estimated homography has vanishing scale")
    try:
        return Homography(h)
    except ValueError as exc:
        raise EstimationError(str(exc)) from exc


def reprojection_errors(h: Homography, corrs: list[Correspondence]) -> np.ndarray:
    src = np.array([c.src for c in corrs], dtype=np.float64)
    dst = np.array([c.dst for c in corrs], dtype=np.float64)
    proj = h.apply(src)
    return np.linalg.norm(proj - dst, axis=1)


def ransac_homography(
    corrs: list[Correspondence],
    inlier_px: float = 3.0,
    iters: int = 2000,
    seed: int = 0,
) -> tuple[Homography, np.ndarray]:
    """RANSAC homography fit; deterministic for a fixed seed.

    Samples minimal sets from a seeded generator, scores by inlier count at
    the reprojection threshold, and refits on the winning inlier set. Ties
    on inlier count keep the earlier model.
    """
    n = len(corrs)
    if n < 4:
        raise EstimationError(f"RANSAC needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        sample = [corrs[j] for j in idx]
        try:
            model = dlt_homography(sample)
        except EstimationError:
            continue
        errs = reprojection_errors(model, corrs)
        mask = errs < inlier_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 4:
        raise AlignmentError("no homography with at least 4 inliers")
    inliers = [c for c, m in zip(corrs, best_mask) if m]
    refined = dlt_homography(inliers)
    return refined, best_mask


# ----------------------------------------------------------------------
# Warping
# ----------------------------------------------------------------------


def warp_to(
    ref: ImagePlane, h: Homography, out_w: int, out_h: int
) -> tuple[ImagePlane, np.ndarray]:
    """Inverse-warp `ref` into an out_w x out_h frame using h: ref -> target.

    Returns the warped plane and a boolean mask of pixels whose source
    position falls inside the reference.
    """
    inv = h.inverse()
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = inv.apply(pts)
    sx = src[:, 0].reshape(out_h, out_w)
    sy = src[:, 1].reshape(out_h, out_w)
    eps = 1e-9
    valid = (
        (sx >= -eps)
        & (sx <= ref.width - 1 + eps)
        & (sy >= -eps)
        & (sy <= ref.height - 1 + eps)
    )
    values = sample_bicubic(ref, sx, sy)
    values[~valid] = 0.0
    return ImagePlane(values), valid
