"""Minimal DICOM reader against synthesized files."""
import struct

import numpy as np
import pytest

from mammostyle.dicomlite import IMPLICIT_VR_LE, read_dicom, write_dicom
from mammostyle.errors import ImageFormatError
from mammostyle.imaging import load_image


def test_write_read_round_trip_16bit(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 4096, size=(32, 24), dtype=np.uint16)
    path = tmp_path / "img.dcm"
    write_dicom(path, pixels, bits_stored=12, view="MLO", vendor="UIH")
    d = read_dicom(path)
    assert np.array_equal(d.pixels, pixels)
    assert d.bits_stored == 12
    assert d.view == "MLO"
    assert d.vendor == "UIH"


def test_write_read_round_trip_8bit(tmp_path):
    pixels = np.arange(64, dtype=np.uint8).reshape(8, 8)
    path = tmp_path / "img8.dcm"
    write_dicom(path, pixels)
    d = read_dicom(path)
    assert np.array_equal(d.pixels, pixels)
    assert d.bits_stored == 8


def test_load_image_uses_dicom_metadata(tmp_path):
    pixels = np.linspace(0, 1023, 64, dtype=np.uint16).reshape(8, 8)
    path = tmp_path / "meta.dcm"
    write_dicom(path, pixels, bits_stored=10, view="CC", vendor="UIH")
    m = load_image(path)
    assert m.view == "CC"
    assert m.vendor == "UIH"
    assert m.source_bit_depth == 10
    assert m.pixels.max() == pytest.approx(1023 / 1023)


def test_explicit_args_override_tags(tmp_path):
    pixels = np.linspace(0, 255, 64, dtype=np.uint8).reshape(8, 8)
    path = tmp_path / "ovr.dcm"
    write_dicom(path, pixels, view="CC", vendor="UIH")
    m = load_image(path, view="MLO", vendor="GE")
    assert m.view == "MLO"
    assert m.vendor == "GE"


def test_monochrome1_is_inverted(tmp_path):
    pixels = np.array([[0, 255]], dtype=np.uint8)
    path = tmp_path / "mono1.dcm"
    write_dicom(path, pixels, photometric="MONOCHROME1", view="CC", vendor="GE")
    m = load_image(path)
    assert m.pixels[0, 0] == 1.0 and m.pixels[0, 1] == 0.0


def test_implicit_vr_parsing(tmp_path):
    # Hand-built implicit-VR-LE dataset with the minimum viable tag set.
    def meta_elem(tag, vr, value):
        if len(value) % 2:
            value += b"\x00"
        return struct.pack("<HH2sH", tag[0], tag[1], vr, len(value)) + value

    def implicit_elem(tag, value):
        if len(value) % 2:
            value += b"\x00"
        return struct.pack("<HHI", tag[0], tag[1], len(value)) + value

    pixels = np.arange(16, dtype=np.uint16).reshape(4, 4) * 100
    meta = meta_elem((0x0002, 0x0010), b"UI", IMPLICIT_VR_LE.encode())
    ds = b"".join(
        [
            implicit_elem((0x0028, 0x0002), struct.pack("<H", 1)),
            implicit_elem((0x0028, 0x0004), b"MONOCHROME2"),
            implicit_elem((0x0028, 0x0010), struct.pack("<H", 4)),
            implicit_elem((0x0028, 0x0011), struct.pack("<H", 4)),
            implicit_elem((0x0028, 0x0100), struct.pack("<H", 16)),
            implicit_elem((0x0028, 0x0101), struct.pack("<H", 16)),
            implicit_elem((0x0028, 0x0103), struct.pack("<H", 0)),
            implicit_elem((0x7FE0, 0x0010), pixels.astype("<u2").tobytes()),
        ]
    )
    path = tmp_path / "implicit.dcm"
    path.write_bytes(b"\x00" * 128 + b"DICM" + meta + ds)
    d = read_dicom(path)
    assert np.array_equal(d.pixels, pixels)


def test_sequences_are_skipped(tmp_path):
    # Explicit VR with an undefined-length SQ before the pixel data.
    def elem_short(tag, vr, value):
        if len(value) % 2:
            value += b"\x00"
        return struct.pack("<HH2sH", tag[0], tag[1], vr, len(value)) + value

    pixels = np.full((2, 2), 7, dtype=np.uint8)
    pixels[0, 0] = 0
    meta = elem_short((0x0002, 0x0010), b"UI", b"1.2.840.10008.1.2.1")
    seq = struct.pack("<HH2sHI", 0x0040, 0xA730, b"SQ", 0, 0xFFFFFFFF)
    seq += struct.pack("<HHI", 0xFFFE, 0xE000, 4) + b"\x01\x02\x03\x04"  # defined item
    seq += struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)  # sequence delimiter
    ds = (
        elem_short((0x0028, 0x0010), b"US", struct.pack("<H", 2))
        + elem_short((0x0028, 0x0011), b"US", struct.pack("<H", 2))
        + elem_short((0x0028, 0x0100), b"US", struct.pack("<H", 8))
        + elem_short((0x0028, 0x0101), b"US", struct.pack("<H", 8))
        + seq
        + struct.pack("<HH2sHI", 0x7FE0, 0x0010, b"OB", 0, 4)
        + pixels.tobytes()
    )
    path = tmp_path / "seq.dcm"
    path.write_bytes(b"\x00" * 128 + b"DICM" + meta + ds)
    d = read_dicom(path)
    assert np.array_equal(d.pixels, pixels)


def test_compressed_syntax_rejected(tmp_path):
    def elem_short(tag, vr, value):
        if len(value) % 2:
            value += b"\x00"
        return struct.pack("<HH2sH", tag[0], tag[1], vr, len(value)) + value

    meta = elem_short((0x0002, 0x0010), b"UI", b"1.2.840.10008.1.2.4.70")  # JPEG lossless
    path = tmp_path / "jpeg.dcm"
    path.write_bytes(b"\x00" * 128 + b"DICM" + meta)
    with pytest.raises(ImageFormatError, match="transfer syntax"):
        read_dicom(path)


def test_color_samples_rejected(tmp_path):
    pixels = np.zeros((2, 2), dtype=np.uint8)
    path = tmp_path / "c.dcm"
    write_dicom(path, pixels)
    data = bytearray(path.read_bytes())
    # Patch SamplesPerPixel value from 1 to 3 in place.
    idx = data.find(struct.pack("<HH2sH", 0x0028, 0x0002, b"US", 2))
    data[idx + 8 : idx + 10] = struct.pack("<H", 3)
    path.write_bytes(bytes(data))
    with pytest.raises(ImageFormatError, match="color"):
        read_dicom(path)


def test_truncated_pixel_data_rejected(tmp_path):
    pixels = np.zeros((8, 8), dtype=np.uint16)
    path = tmp_path / "t.dcm"
    write_dicom(path, pixels)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ImageFormatError):
        read_dicom(path)


def test_not_dicom_rejected(tmp_path):
    path = tmp_path / "x.dcm"
    path.write_bytes(b"\x00" * 200)
    with pytest.raises(ImageFormatError, match="not a DICOM"):
        read_dicom(path)
