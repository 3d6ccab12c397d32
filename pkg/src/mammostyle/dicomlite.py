"""Minimal DICOM reader for uncompressed single-frame grayscale images.

Supports implicit and explicit VR little endian transfer syntaxes only;
encapsulated (compressed) pixel data is rejected. This covers the plain
"for processing"/"for presentation" mammography exports the pipeline
ingests without pulling in a full DICOM stack.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

IMPLICIT_VR_LE = "1.2.840.10008.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

# VRs that use a 2-byte reserved field and a 4-byte length in explicit VR.
_LONG_VRS = {b"OB", b"OW", b"OF", b"OD", b"OL", b"OV", b"SQ", b"UC", b"UR", b"UT", b"UN"}

_TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
_TAG_MANUFACTURER = (0x0008, 0x0070)
_TAG_VIEW_POSITION = (0x0018, 0x5101)
_TAG_SAMPLES_PER_PIXEL = (0x0028, 0x0002)
_TAG_PHOTOMETRIC = (0x0028, 0x0004)
_TAG_ROWS = (0x0028, 0x0010)
_TAG_COLS = (0x0028, 0x0011)
_TAG_BITS_ALLOCATED = (0x0028, 0x0100)
_TAG_BITS_STORED = (0x0028, 0x0101)
_TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
_TAG_PIXEL_DATA = (0x7FE0, 0x0010)

_ITEM = (0xFFFE, 0xE000)
_ITEM_DELIM = (0xFFFE, 0xE00D)
_SEQ_DELIM = (0xFFFE, 0xE0DD)

_UNDEFINED = 0xFFFFFFFF


@dataclass(frozen=True)
class DicomImage:
    """Decoded pixel array plus the metadata the pipeline consumes."""

    pixels: np.ndarray  # raw stored values, uint8 or uint16
    bits_stored: int
    photometric: str
    view: str | None  # "CC"/"MLO" when the ViewPosition tag is usable
    vendor: str | None


def is_dicom(data: bytes) -> bool:
    return len(data) > 132 and data[128:132] == b"DICM"


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def read(self, n: int) -> bytes:
        if self.remaining() < n:
            raise ImageFormatError("truncated DICOM element")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def read_tag(self) -> tuple[int, int]:
        g, e = struct.unpack("<HH", self.read(4))
        return g, e

    def read_header(self, explicit: bool) -> tuple[tuple[int, int], bytes | None, int]:
        """Return (tag, vr, value_length) for the next element."""
        tag = self.read_tag()
        if tag in (_ITEM, _ITEM_DELIM, _SEQ_DELIM):
            (length,) = struct.unpack("<I", self.read(4))
            return tag, None, length
        if explicit:
            vr = self.read(2)
            if vr in _LONG_VRS:
                self.read(2)
                (length,) = struct.unpack("<I", self.read(4))
            else:
                (length,) = struct.unpack("<H", self.read(2))
            return tag, vr, length
        (length,) = struct.unpack("<I", self.read(4))
        return tag, None, length

    def skip_sequence(self, explicit: bool) -> None:
        """Consume an undefined-length sequence, nesting included."""
        while True:
            tag, _, length = self.read_header(explicit)
            if tag == _SEQ_DELIM:
                return
            if tag != _ITEM:
                raise ImageFormatError("malformed DICOM sequence")
            if length == _UNDEFINED:
                self._skip_item(explicit)
            else:
                self.read(length)

    def _skip_item(self, explicit: bool) -> None:
        while True:
            tag, vr, length = self.read_header(explicit)
            if tag == _ITEM_DELIM:
                return
            if length == _UNDEFINED:
                self.skip_sequence(explicit)
            else:
                self.read(length)


def _decode_str(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip("\x00 ").strip()


def _decode_us(raw: bytes) -> int:
    if len(raw) < 2:
        raise ImageFormatError("short US value in DICOM header")
    return struct.unpack("<H", raw[:2])[0]


def read_dicom(path: str | Path) -> DicomImage:
    """Parse a single-frame grayscale DICOM file into raw stored values."""
    data = Path(path).read_bytes()
    if not is_dicom(data):
        raise ImageFormatError(f"not a DICOM file: {path}")
    r = _Reader(data)
    r.pos = 132

    # File meta group (0002,xxxx) is always explicit VR little endian.
    syntax = EXPLICIT_VR_LE
    while r.remaining() >= 8:
        mark = r.pos
        tag, vr, length = r.read_header(explicit=True)
        if tag[0] != 0x0002:
            r.pos = mark
            break
        value = r.read(length)
        if tag == _TAG_TRANSFER_SYNTAX:
            syntax = _decode_str(value)

    if syntax == EXPLICIT_VR_LE:
        explicit = True
    elif syntax == IMPLICIT_VR_LE:
        explicit = False
    else:
        raise ImageFormatError(f"unsupported transfer syntax {syntax!r} (compressed?)")

    fields: dict[tuple[int, int], bytes] = {}
    pixel_data: bytes | None = None
    while r.remaining() >= 8:
        tag, vr, length = r.read_header(explicit)
        if tag == _TAG_PIXEL_DATA:
            if length == _UNDEFINED:
                raise ImageFormatError("encapsulated pixel data is not supported")
            pixel_data = r.read(length)
            break
        if length == _UNDEFINED or vr == b"SQ":
            if length == _UNDEFINED:
                r.skip_sequence(explicit)
            else:
                r.read(length)
            continue
        value = r.read(length)
        if tag[0] in (0x0008, 0x0018, 0x0028):
            fields[tag] = value

    if pixel_data is None:
        raise ImageFormatError("no pixel data found")
    if _TAG_ROWS not in fields or _TAG_COLS not in fields:
        raise ImageFormatError("missing Rows/Columns")

    rows = _decode_us(fields[_TAG_ROWS])
    cols = _decode_us(fields[_TAG_COLS])
    samples = _decode_us(fields.get(_TAG_SAMPLES_PER_PIXEL, b"\x01\x00"))
    if samples != 1:
        raise ImageFormatError("color image: SamplesPerPixel != 1")
    bits_alloc = _decode_us(fields.get(_TAG_BITS_ALLOCATED, b"\x10\x00"))
    bits_stored = _decode_us(fields.get(_TAG_BITS_STORED, struct.pack("<H", bits_alloc)))
    pixel_rep = _decode_us(fields.get(_TAG_PIXEL_REPRESENTATION, b"\x00\x00"))
    if pixel_rep != 0:
        raise ImageFormatError("signed pixel data is not supported")
    photometric = _decode_str(fields.get(_TAG_PHOTOMETRIC, b"MONOCHROME2"))
    if photometric not in ("MONOCHROME1", "MONOCHROME2"):
        raise ImageFormatError(f"color image: PhotometricInterpretation {photometric!r}")

    if bits_alloc == 8:
        dtype = np.uint8
    elif bits_alloc == 16:
        dtype = np.uint16
    else:
        raise ImageFormatError(f"unsupported BitsAllocated {bits_alloc}")
    expected = rows * cols * (bits_alloc // 8)
    if len(pixel_data) < expected:
        raise ImageFormatError("pixel data shorter than Rows*Columns")
    pixels = np.frombuffer(pixel_data[:expected], dtype=dtype).reshape(rows, cols)

    view_raw = _decode_str(fields.get(_TAG_VIEW_POSITION, b"")).upper()
    view = view_raw if view_raw in ("CC", "MLO") else None
    vendor = _decode_str(fields.get(_TAG_MANUFACTURER, b"")) or None
    return DicomImage(
        pixels=pixels,
        bits_stored=bits_stored,
        photometric=photometric,
        view=view,
        vendor=vendor,
    )


def write_dicom(
    path: str | Path,
    pixels: np.ndarray,
    *,
    bits_stored: int | None = None,
    photometric: str = "MONOCHROME2",
    view: str | None = None,
    vendor: str | None = None,
) -> None:
    """Write an explicit-VR-LE single-frame grayscale DICOM file.

    Round-trip companion to :func:`read_dicom`; used for interface tests and to
    synthesize fixtures, not a general-purpose exporter.
    """
    if pixels.dtype == np.uint8:
        bits_alloc = 8
    elif pixels.dtype == np.uint16:
        bits_alloc = 16
    else:
        raise ImageFormatError("pixels must be uint8 or uint16")
    if bits_stored is None:
        bits_stored = bits_alloc

    def elem_short(tag: tuple[int, int], vr: bytes, value: bytes) -> bytes:
        if len(value) % 2:
            value += b"\x00" if vr != b"UI" else b"\x00"
        return struct.pack("<HH2sH", tag[0], tag[1], vr, len(value)) + value

    def elem_long(tag: tuple[int, int], vr: bytes, value: bytes) -> bytes:
        if len(value) % 2:
            value += b"\x00"
        return struct.pack("<HH2sHI", tag[0], tag[1], vr, 0, len(value)) + value

    meta = elem_short(_TAG_TRANSFER_SYNTAX, b"UI", EXPLICIT_VR_LE.encode())
    meta = elem_long((0x0002, 0x0001), b"OB", b"\x00\x01") + meta
    meta = elem_short((0x0002, 0x0000), b"UL", struct.pack("<I", 0)) + meta  # placeholder
    # Recompute group length now that the remainder of the group is known.
    body_len = len(meta) - 12
    meta = elem_short((0x0002, 0x0000), b"UL", struct.pack("<I", body_len)) + meta[12:]

    ds = b""
    if vendor:
        ds += elem_short(_TAG_MANUFACTURER, b"LO", vendor.encode())
    if view:
        ds += elem_short(_TAG_VIEW_POSITION, b"CS", view.encode())
    ds += elem_short(_TAG_SAMPLES_PER_PIXEL, b"US", struct.pack("<H", 1))
    ds += elem_short(_TAG_PHOTOMETRIC, b"CS", photometric.encode())
    ds += elem_short(_TAG_ROWS, b"US", struct.pack("<H", pixels.shape[0]))
    ds += elem_short(_TAG_COLS, b"US", struct.pack("<H", pixels.shape[1]))
    ds += elem_short(_TAG_BITS_ALLOCATED, b"US", struct.pack("<H", bits_alloc))
    ds += elem_short(_TAG_BITS_STORED, b"US", struct.pack("<H", bits_stored))
    ds += elem_short(_TAG_PIXEL_REPRESENTATION, b"US", struct.pack("<H", 0))
    raw = np.ascontiguousarray(pixels.astype("<u1" if bits_alloc == 8 else "<u2")).tobytes()
    ds += elem_long(_TAG_PIXEL_DATA, b"OB" if bits_alloc == 8 else b"OW", raw)

    Path(path).write_bytes(b"\x00" * 128 + b"DICM" + meta + ds)
