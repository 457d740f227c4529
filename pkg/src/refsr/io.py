"""Image and map file I/O.

Supported formats: 8-bit grayscale/RGB PNG (via Pillow), binary PGM/PPM,
and raw float32 high-frequency maps with a small fixed header.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .image import ColorImage, ImagePlane, clamp01

HF_MAGIC = b"HFM1"


class FormatError(ValueError):
    """Raised for unreadable or corrupted on-disk data."""


def _plane_from_u8(arr: np.ndarray) -> ImagePlane:
    return ImagePlane(arr.astype(np.float64) / 255.0)


def _u8_from_plane(plane: ImagePlane) -> np.ndarray:
    return np.round(clamp01(plane).data * 255.0).astype(np.uint8)


def read_image(path) -> ImagePlane | ColorImage:
    """Read a PNG/PGM/PPM file as a luma plane or an RGB ColorImage."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        return _read_netpbm(path)
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
                return _plane_from_u8(arr)
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return ColorImage(
        _plane_from_u8(rgb[:, :, 0]),
        _plane_from_u8(rgb[:, :, 1]),
        _plane_from_u8(rgb[:, :, 2]),
        "rgb",
    )


def write_image(path, img: ImagePlane | ColorImage) -> None:
    """Write a plane as grayscale or an RGB image, clamping to [0,1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if isinstance(img, ColorImage):
        if img.space != "rgb":
            from .image import to_rgb

            img = to_rgb(img)
        channels = np.stack(
            [_u8_from_plane(img.c1), _u8_from_plane(img.c2), _u8_from_plane(img.c3)],
            axis=-1,
        )
        if suffix == ".ppm":
            _write_netpbm(path, channels)
        else:
            Image.fromarray(channels, "RGB").save(path, format="PNG")
    else:
        arr = _u8_from_plane(img)
        if suffix == ".pgm":
            _write_netpbm(path, arr)
        else:
            Image.fromarray(arr, "L").save(path, format="PNG")


def _read_netpbm(path: Path):
    raw = path.read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    color = raw[:2] == b"P6"
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: bad header fields") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    count = width * height * (3 if color else 1)
    data = raw[pos : pos + count]
    if len(data) != count:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8)
    if color:
        arr = arr.reshape(height, width, 3)
        return ColorImage(
            _plane_from_u8(arr[:, :, 0]),
            _plane_from_u8(arr[:, :, 1]),
            _plane_from_u8(arr[:, :, 2]),
            "rgb",
        )
    return _plane_from_u8(arr.reshape(height, width))


def _write_netpbm(path: Path, arr: np.ndarray) -> None:
    color = arr.ndim == 3
    magic = b"P6" if color else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
    path.write_bytes(header + arr.tobytes())


def write_hf_map(path, plane: ImagePlane) -> None:
    """Persist an unbounded map as little-endian float32 with a 16-byte header."""
    header = HF_MAGIC + struct.pack("<III", plane.width, plane.height, 0)
    body = plane.data.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_hf_map(path) -> ImagePlane:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != HF_MAGIC:
        raise FormatError(f"{path}: bad magic for HF map")
    width, height, _ = struct.unpack("<III", raw[4:16])
    count = width * height
    body = raw[16 : 16 + 4 * count]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: truncated HF map")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(height, width)
    return ImagePlane(data)


def luma_of(img: ImagePlane | ColorImage) -> ImagePlane:
    """Luma plane of any supported image value."""
    if isinstance(img, ImagePlane):
        return img
    if img.space == "ycbcr":
        return img.c1
    from .image import to_luma_chroma

    return to_luma_chroma(img).c1
