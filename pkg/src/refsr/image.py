"""Single-channel image containers, color handling, resampling and map algebra.

All luma processing happens on float64 planes with values nominally in
[0, 1]; high-frequency residual maps share the container but are unbounded.
Scale factors are plain ints restricted to 2, 3 and 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALE_FACTORS = (2, 3, 4)

# Keys cubic-convolution coefficient used for all bicubic resampling.
CUBIC_A = -0.5


class ImagePlane:
    """Row-major single-channel raster of finite float64 samples."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"plane must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"plane must be at least 1x1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("plane contains non-finite samples")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def copy(self) -> "ImagePlane":
        return ImagePlane(self.data.copy())

    def __repr__(self):
        return f"ImagePlane({self.width}x{self.height})"


@dataclass
class ColorImage:
    """Three same-sized planes plus the color space they live in."""

    c1: ImagePlane
    c2: ImagePlane
    c3: ImagePlane
    space: str = "rgb"  # "rgb" or "ycbcr"

    def __post_init__(self):
        if not (self.c1.shape == self.c2.shape == self.c3.shape):
            raise ValueError("color planes have mismatched dimensions")
        if self.space not in ("rgb", "ycbcr"):
            raise ValueError(f"unknown color space {self.space!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.c1.shape


def check_scale(s: int) -> int:
    if s not in SCALE_FACTORS:
        raise ValueError(f"scale factor must be one of {SCALE_FACTORS}, got {s}")
    return s


# ----------------------------------------------------------------------
# Color conversion (BT.601 luma/chroma with 0.5 chroma offset)
# ----------------------------------------------------------------------

_KR, _KG, _KB = 0.299, 0.587, 0.114


def to_luma_chroma(img: ColorImage) -> ColorImage:
    """Convert an RGB image in [0,1] to Y/Cb/Cr with chroma offset 0.5."""
    if img.space != "rgb":
        raise ValueError("to_luma_chroma expects an RGB image")
    r, g, b = img.c1.data, img.c2.data, img.c3.data
    y = _KR * r + _KG * g + _KB * b
    cb = 0.5 * (b - y) / (1.0 - _KB) + 0.5
    cr = 0.5 * (r - y) / (1.0 - _KR) + 0.5
    return ColorImage(ImagePlane(y), ImagePlane(cb), ImagePlane(cr), "ycbcr")


def to_rgb(img: ColorImage) -> ColorImage:
    """Inverse of :func:`to_luma_chroma`; output is not clamped."""
    if img.space != "ycbcr":
        raise ValueError("to_rgb expects a Y/Cb/Cr image")
    y, cb, cr = img.c1.data, img.c2.data, img.c3.data
    r = y + 2.0 * (1.0 - _KR) * (cr - 0.5)
    b = y + 2.0 * (1.0 - _KB) * (cb - 0.5)
    g = (y - _KR * r - _KB * b) / _KG
    return ColorImage(ImagePlane(r), ImagePlane(g), ImagePlane(b), "rgb")


# ----------------------------------------------------------------------
# Degradation and upsampling
# ----------------------------------------------------------------------


def default_blur_sigma(s: int) -> float:
    """Blur strength used when degrading by factor s."""
    return 0.4 * s


def gaussian_blur(plane: ImagePlane, sigma: float) -> ImagePlane:
    """Separable Gaussian blur with replicate borders; identity for sigma <= 0."""
    if sigma <= 0.0:
        return plane.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(plane.data, radius, mode="edge")
    # horizontal then vertical pass
    tmp = np.zeros((padded.shape[0], plane.width), dtype=np.float64)
    for k, w in enumerate(kernel):
        tmp += w * padded[:, k : k + plane.width]
    out = np.zeros((plane.height, plane.width), dtype=np.float64)
    for k, w in enumerate(kernel):
        out += w * tmp[k : k + plane.height, :]
    return ImagePlane(out)


def mod_crop(plane: ImagePlane, s: int) -> ImagePlane:
    """Crop bottom/right so both dimensions are multiples of s."""
    h = plane.height - plane.height % s
    w = plane.width - plane.width % s
    if h < 1 or w < 1:
        raise ValueError(f"plane {plane.shape} too small to crop to multiple of {s}")
    if (h, w) == plane.shape:
        return plane
    return ImagePlane(plane.data[:h, :w])


def degrade(hr: ImagePlane, s: int, blur_sigma: float | None = None) -> ImagePlane:
    """Blur then decimate by averaging each s x s block.

    Dimensions must already be multiples of s (use mod_crop first).
    blur_sigma defaults to 0.4*s.
    """
    check_scale(s)
    if hr.height % s or hr.width % s:
        raise ValueError(f"dimensions {hr.shape} not divisible by {s}")
    if blur_sigma is None:
        blur_sigma = default_blur_sigma(s)
    blurred = gaussian_blur(hr, blur_sigma).data
    h, w = hr.height // s, hr.width // s
    lr = blurred.reshape(h, s, w, s).mean(axis=(1, 3))
    return ImagePlane(lr)


def upsample_replicate(lr: ImagePlane, s: int) -> ImagePlane:
    """Copy every pixel into its s x s block of the enlarged image."""
    check_scale(s)
    return ImagePlane(np.repeat(np.repeat(lr.data, s, axis=0), s, axis=1))


def _cubic_weights(frac):
    """Four tap weights of the Keys kernel (a = -0.5) at offsets -1..2."""
    a = CUBIC_A
    t = np.asarray(frac, dtype=np.float64)
    w = np.empty(t.shape + (4,), dtype=np.float64)
    for i, d in enumerate((1.0 + t, t, 1.0 - t, 2.0 - t)):
        x = np.abs(d)
        w[..., i] = np.where(
            x <= 1.0,
            (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0,
            np.where(x < 2.0, a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a, 0.0),
        )
    return w


def _resample_axis(data: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    """Cubic resampling of one axis under the pixel-center convention.

    Border taps come from odd reflection, which continues ramps linearly so
    affine content survives resizing.
    """
    in_len = data.shape[axis]
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    weights = _cubic_weights(frac)  # (out_len, 4)

    moved = np.moveaxis(data, axis, 0)
    if in_len == 1:
        padded = np.repeat(moved, 5, axis=0)  # constant row: reflection is flat
    else:
        padded = np.pad(moved, [(2, 2)] + [(0, 0)] * (moved.ndim - 1),
                        mode="reflect", reflect_type="odd")
    taps = base[:, None] + np.arange(-1, 3)[None, :] + 2  # +2 for pad offset
    np.clip(taps, 0, padded.shape[0] - 1, out=taps)
    gathered = padded[taps]  # (out_len, 4, ...)
    shape = (out_len, 4) + (1,) * (moved.ndim - 1)
    out = (gathered * weights.reshape(shape)).sum(axis=1)
    return np.moveaxis(out, 0, axis)


def resize_bicubic(plane: ImagePlane, out_w: int, out_h: int) -> ImagePlane:
    """Separable bicubic resize to an arbitrary size."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be positive")
    out = _resample_axis(plane.data, out_h, axis=0)
    out = _resample_axis(out, out_w, axis=1)
    return ImagePlane(out)


def upsample_bicubic(plane: ImagePlane, s: int) -> ImagePlane:
    """Bicubic upsampling by an integer factor; exact on constants."""
    check_scale(s)
    return resize_bicubic(plane, plane.width * s, plane.height * s)


def sample_bicubic(plane: ImagePlane, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Evaluate the bicubic interpolant at arbitrary (x, y) positions.

    Coordinates are pixel-centered; taps outside the plane use odd
    reflection. Integer coordinates reproduce stored samples exactly.
    """
    data = plane.data
    if data.shape[0] == 1 or data.shape[1] == 1:
        padded = np.pad(data, 2, mode="edge")
    else:
        padded = np.pad(data, 2, mode="reflect", reflect_type="odd")
    bx = np.floor(xs).astype(np.int64)
    by = np.floor(ys).astype(np.int64)
    fx = xs - bx
    fy = ys - by
    wx = _cubic_weights(fx)  # (..., 4)
    wy = _cubic_weights(fy)
    out = np.zeros(np.broadcast(xs, ys).shape, dtype=np.float64)
    for j in range(4):
        row = np.clip(by + (j - 1) + 2, 0, padded.shape[0] - 1)
        acc = np.zeros_like(out)
        for i in range(4):
            col = np.clip(bx + (i - 1) + 2, 0, padded.shape[1] - 1)
            acc += wx[..., i] * padded[row, col]
        out += wy[..., j] * acc
    return out


# ----------------------------------------------------------------------
# Edge / gradient operators and map algebra
# ----------------------------------------------------------------------


def edge_map(img: ImagePlane) -> ImagePlane:
    """Sobel gradient magnitude with replicate-padded borders."""
    p = np.pad(img.data, 1, mode="edge")
    # horizontal derivative kernel [[-1,0,1],[-2,0,2],[-1,0,1]]
    gx = (
        (p[:-2, 2:] - p[:-2, :-2])
        + 2.0 * (p[1:-1, 2:] - p[1:-1, :-2])
        + (p[2:, 2:] - p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] - p[:-2, :-2])
        + 2.0 * (p[2:, 1:-1] - p[:-2, 1:-1])
        + (p[2:, 2:] - p[:-2, 2:])
    )
    return ImagePlane(np.hypot(gx, gy))


def gradient(img: ImagePlane) -> tuple[ImagePlane, ImagePlane]:
    """Central-difference x and y gradients with replicate borders."""
    gx, gy = gradient_arrays(img.data)
    return ImagePlane(gx), ImagePlane(gy)


def gradient_arrays(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(data, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return gx, gy


def add_maps(base: ImagePlane, residual: ImagePlane) -> ImagePlane:
    """Element-wise sum; values are not clamped here."""
    if base.shape != residual.shape:
        raise ValueError(f"dimension mismatch {base.shape} vs {residual.shape}")
    return ImagePlane(base.data + residual.data)


def clamp01(plane: ImagePlane) -> ImagePlane:
    return ImagePlane(np.clip(plane.data, 0.0, 1.0))
