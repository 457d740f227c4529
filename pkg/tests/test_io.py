import numpy as np
import pytest

from refsr.image import ColorImage, ImagePlane
from refsr.io import (
    FormatError,
    read_hf_map,
    read_image,
    write_hf_map,
    write_image,
)

from conftest import random_plane


def quantized(plane):
    return np.round(np.clip(plane.data, 0, 1) * 255) / 255.0


class TestPng:
    def test_gray_round_trip(self, tmp_path, rng):
        p = random_plane((9, 7), 11)
        path = tmp_path / "g.png"
        write_image(path, p)
        back = read_image(path)
        assert isinstance(back, ImagePlane)
        assert np.allclose(back.data, quantized(p), atol=1e-12)

    def test_rgb_round_trip(self, tmp_path, rng):
        img = ColorImage(
            random_plane((6, 8), 1), random_plane((6, 8), 2), random_plane((6, 8), 3)
        )
        path = tmp_path / "c.png"
        write_image(path, img)
        back = read_image(path)
        assert isinstance(back, ColorImage)
        for orig, rec in zip((img.c1, img.c2, img.c3), (back.c1, back.c2, back.c3)):
            assert np.allclose(rec.data, quantized(orig), atol=1e-12)

    def test_deterministic_bytes(self, tmp_path):
        p = random_plane((16, 16), 5)
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        write_image(a, p)
        write_image(b, p)
        assert a.read_bytes() == b.read_bytes()


class TestNetpbm:
    def test_pgm_round_trip(self, tmp_path):
        p = random_plane((5, 6), 21)
        path = tmp_path / "x.pgm"
        write_image(path, p)
        back = read_image(path)
        assert np.allclose(back.data, quantized(p), atol=1e-12)

    def test_ppm_round_trip(self, tmp_path):
        img = ColorImage(
            random_plane((4, 4), 1), random_plane((4, 4), 2), random_plane((4, 4), 3)
        )
        path = tmp_path / "x.ppm"
        write_image(path, img)
        back = read_image(path)
        assert isinstance(back, ColorImage)
        assert np.allclose(back.c2.data, quantized(img.c2), atol=1e-12)

    def test_truncated_pgm_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(FormatError):
            read_image(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P9\n2 2\n255\n\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            read_image(path)


class TestHfMap:
    def test_round_trip_is_float32_exact(self, tmp_path, rng):
        values = rng.normal(0, 0.3, size=(7, 5)).astype(np.float32).astype(np.float64)
        plane = ImagePlane(values)
        path = tmp_path / "m.hfm"
        write_hf_map(path, plane)
        back = read_hf_map(path)
        assert np.array_equal(back.data, values)

    def test_header_layout(self, tmp_path):
        plane = ImagePlane(np.zeros((2, 3)))
        path = tmp_path / "m.hfm"
        write_hf_map(path, plane)
        raw = path.read_bytes()
        assert raw[:4] == b"HFM1"
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.hfm"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError):
            read_hf_map(path)

    def test_truncation(self, tmp_path):
        plane = ImagePlane(np.ones((4, 4)))
        path = tmp_path / "m.hfm"
        write_hf_map(path, plane)
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            read_hf_map(path)
