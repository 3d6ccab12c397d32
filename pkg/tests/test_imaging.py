"""Ingestion, normalization, masking, and PNG round trips."""
import numpy as np
import pytest
from PIL import Image

from conftest import synthetic_breast
from mammostyle.errors import DegenerateImageError, ImageFormatError
from mammostyle.imaging import (
    Mammogram,
    compute_breast_mask,
    load_image,
    load_pixels,
    mammogram_from_array,
    save_image,
)


def write_png16(path, values: np.ndarray):
    Image.fromarray(values.astype(np.uint16)).save(path)


def write_png8(path, values: np.ndarray):
    Image.fromarray(values.astype(np.uint8), mode="L").save(path)


class TestLoadImage:
    def test_16bit_range_endpoints(self, tmp_path):
        arr = np.zeros((4, 4), dtype=np.uint16)
        arr[2:, :] = 65535
        path = tmp_path / "img.png"
        write_png16(path, arr)
        m = load_image(path, view="CC", vendor="GE")
        assert m.pixels.min() == 0.0 and m.pixels.max() == 1.0
        assert m.source_bit_depth == 16

    def test_all_constant_is_zero_variance(self, tmp_path):
        path = tmp_path / "flat.png"
        write_png8(path, np.full((8, 8), 128))
        with pytest.raises(DegenerateImageError, match="zero-variance image"):
            load_image(path, view="CC", vendor="GE")

    def test_16bit_midpoint_value(self, tmp_path):
        arr = np.array([[0, 32768, 65535]] * 3, dtype=np.uint16).T
        path = tmp_path / "mid.png"
        write_png16(path, arr)
        m = load_image(path, view="CC", vendor="GE")
        # value / (2^16 - 1), recomputed by hand
        assert m.pixels[0, 0] == 0.0
        assert m.pixels[1, 0] == pytest.approx(32768 / 65535, abs=1e-12)
        assert m.pixels[2, 0] == 1.0

    def test_8bit_scaling(self, tmp_path):
        path = tmp_path / "b8.png"
        write_png8(path, np.array([[0, 51], [102, 255]]))
        m = load_image(path, view="MLO", vendor="GE")
        assert m.pixels[0, 1] == pytest.approx(51 / 255)
        assert m.source_bit_depth == 8

    def test_color_png_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(ImageFormatError, match="color"):
            load_image(path, view="CC", vendor="GE")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageFormatError, match="no such file"):
            load_image(tmp_path / "absent.png", view="CC", vendor="GE")

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not an image at all")
        with pytest.raises(ImageFormatError):
            load_image(path, view="CC", vendor="GE")

    def test_png_requires_view_and_vendor(self, tmp_path):
        path = tmp_path / "img.png"
        write_png8(path, np.array([[0, 255]]))
        with pytest.raises(ImageFormatError, match="view"):
            load_image(path, vendor="GE")
        with pytest.raises(ImageFormatError, match="vendor"):
            load_image(path, view="CC")

    def test_load_pixels_skips_metadata(self, tmp_path):
        path = tmp_path / "img.png"
        write_png8(path, np.array([[0, 255]]))
        pixels, bits = load_pixels(path)
        assert bits == 8
        assert np.array_equal(pixels, [[0.0, 1.0]])


class TestBreastMask:
    def test_all_zero_image_gives_empty_mask(self):
        assert compute_breast_mask(np.zeros((16, 16))).sum() == 0

    def test_disk_area_within_one_percent(self):
        img = synthetic_breast(256, radius=100, intensity=0.8)
        mask = compute_breast_mask(img)
        # Oracle: count pixels whose center is within the radius.
        yy, xx = np.mgrid[0:256, 0:256]
        c = 256 / 2 - 0.5
        oracle = ((yy - c) ** 2 + (xx - c) ** 2 <= 100**2).sum()
        assert mask.sum() == oracle
        assert abs(mask.sum() - np.pi * 100**2) <= 0.01 * np.pi * 100**2

    def test_keeps_only_largest_component(self):
        img = np.zeros((64, 64))
        img[2:27, 2:22] = 0.9  # 500 px
        img[40:50, 40:60] = 0.9  # 200 px
        mask = compute_breast_mask(img)
        assert mask.sum() == 500
        assert mask[40:50, 40:60].sum() == 0

    def test_fills_holes(self):
        img = synthetic_breast(128, radius=40)
        img[60:68, 60:68] = 0.0  # punch a hole
        mask = compute_breast_mask(img)
        assert mask[62, 62] == 1

    def test_intensity_scaling_invariance_above_threshold(self):
        img = synthetic_breast(64, radius=20, intensity=0.2)
        m1 = compute_breast_mask(img)
        m2 = compute_breast_mask(img * 3.9)  # foreground stays above tau
        assert np.array_equal(m1, m2)

    def test_below_threshold_is_background(self):
        img = np.full((8, 8), 0.04)
        img[0, 0] = 0.5
        assert compute_breast_mask(img).sum() == 1


class TestSaveImage:
    @pytest.mark.parametrize("bit_depth", [8, 16])
    def test_round_trip_quantization_bound(self, tmp_path, bit_depth):
        rng = np.random.default_rng(0)
        m = mammogram_from_array(rng.random((16, 16)), view="CC", vendor="GE")
        path = tmp_path / "out.png"
        save_image(m, path, bit_depth=bit_depth)
        back = load_image(path, view="CC", vendor="GE")
        assert np.abs(back.pixels - m.pixels).max() <= 1.0 / (2**bit_depth - 1)
        assert back.source_bit_depth == bit_depth

    def test_grid_values_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        codes = rng.integers(0, 65536, size=(12, 12))
        m = mammogram_from_array(codes / 65535.0, view="CC", vendor="GE")
        path = tmp_path / "grid.png"
        save_image(m, path, bit_depth=16)
        back = load_image(path, view="CC", vendor="GE")
        assert np.array_equal(back.pixels, m.pixels)

    def test_load_save_load_idempotent(self, tmp_path):
        rng = np.random.default_rng(2)
        m0 = mammogram_from_array(rng.random((10, 10)), view="CC", vendor="GE")
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        save_image(m0, p1, bit_depth=16)
        m1 = load_image(p1, view="CC", vendor="GE")
        save_image(m1, p2, bit_depth=16)
        m2 = load_image(p2, view="CC", vendor="GE")
        assert np.array_equal(m1.pixels, m2.pixels)

    def test_invalid_bit_depth(self, tmp_path):
        m = mammogram_from_array(np.linspace(0, 1, 16).reshape(4, 4), "CC", "GE")
        with pytest.raises(ImageFormatError):
            save_image(m, tmp_path / "x.png", bit_depth=12)

    def test_unwritable_path(self, tmp_path):
        m = mammogram_from_array(np.linspace(0, 1, 16).reshape(4, 4), "CC", "GE")
        with pytest.raises((ImageFormatError, FileNotFoundError)):
            save_image(m, tmp_path / "missing_dir" / "x.png")


class TestMammogramValidation:
    def test_out_of_range_pixels_rejected(self):
        with pytest.raises(ImageFormatError):
            Mammogram(
                pixels=np.array([[0.0, 1.5]]),
                view="CC",
                vendor="GE",
                breast_mask=np.zeros((1, 2)),
            )

    def test_nonfinite_rejected(self):
        with pytest.raises(ImageFormatError):
            Mammogram(
                pixels=np.array([[0.0, np.nan]]),
                view="CC",
                vendor="GE",
                breast_mask=np.zeros((1, 2)),
            )

    def test_bad_view_rejected(self):
        with pytest.raises(ImageFormatError):
            Mammogram(
                pixels=np.zeros((2, 2)),
                view="XX",
                vendor="GE",
                breast_mask=np.zeros((2, 2)),
            )

    def test_mask_shape_mismatch_rejected(self):
        with pytest.raises(ImageFormatError):
            Mammogram(
                pixels=np.zeros((2, 2)),
                view="CC",
                vendor="GE",
                breast_mask=np.zeros((3, 3)),
            )

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ImageFormatError):
            Mammogram(
                pixels=np.zeros((2, 2)),
                view="CC",
                vendor="GE",
                breast_mask=np.full((2, 2), 2),
            )
