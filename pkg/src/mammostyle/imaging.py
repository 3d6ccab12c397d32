"""Image ingestion, normalization, breast masking, and persistence."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import dicomlite
from .errors import DegenerateImageError, ImageFormatError

VIEWS = ("CC", "MLO")

# Background in normalized mammograms sits near zero; anything above this
# fraction of the intensity range is treated as tissue candidate.
MASK_THRESHOLD = 0.05

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(eq=False)
class Mammogram:
    """Normalized grayscale image with view/vendor metadata and breast mask.

    ``pixels`` are float64 in [0, 1], scaled from the full representable range
    of the source bit depth. ``breast_mask`` is a same-shaped {0,1} uint8 array.
    """

    pixels: np.ndarray
    view: str
    vendor: str
    breast_mask: np.ndarray = field(repr=False)
    source_bit_depth: int = 16

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ImageFormatError("pixels must be a 2-D array")
        if not np.isfinite(self.pixels).all():
            raise ImageFormatError("non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ImageFormatError("pixel values outside [0, 1]")
        if self.view not in VIEWS:
            raise ImageFormatError(f"view must be one of {VIEWS}, got {self.view!r}")
        self.breast_mask = np.asarray(self.breast_mask)
        if self.breast_mask.shape != self.pixels.shape:
            raise ImageFormatError("breast_mask shape must match pixels")
        if not np.isin(self.breast_mask, (0, 1)).all():
            raise ImageFormatError("breast_mask must be {0,1}-valued")
        self.breast_mask = self.breast_mask.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def breast_area(self) -> int:
        return int(self.breast_mask.sum())


def mammogram_from_array(
    pixels: np.ndarray, view: str, vendor: str, source_bit_depth: int = 16
) -> Mammogram:
    """Wrap an already-normalized [0,1] array, computing its breast mask."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return Mammogram(
        pixels=pixels,
        view=view,
        vendor=vendor,
        breast_mask=compute_breast_mask(pixels),
        source_bit_depth=source_bit_depth,
    )


def compute_breast_mask(pixels: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Largest 4-connected component above ``threshold``, holes filled.

    Returns an all-zero mask when nothing exceeds the threshold, which callers
    treat as "no breast found".
    """
    pixels = np.asarray(pixels)
    fg = pixels > threshold
    if not fg.any():
        return np.zeros(pixels.shape, dtype=np.uint8)
    # Default structure of ndimage.label is 4-connectivity in 2-D.
    labels, count = ndimage.label(fg)
    if count > 1:
        sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, count + 1))
        keep = int(np.argmax(sizes)) + 1
    else:
        keep = 1
    mask = labels == keep
    mask = ndimage.binary_fill_holes(mask)
    return mask.astype(np.uint8)


def _read_png(path: Path) -> tuple[np.ndarray, int]:
    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            bit_depth = 8
        elif mode in ("I", "I;16"):
            bit_depth = 16
        else:
            raise ImageFormatError(f"color image not supported (mode {mode})")
        arr = np.asarray(im)
    return arr.astype(np.int64), bit_depth


def _load_normalized(path: Path) -> tuple[np.ndarray, int, str | None, str | None]:
    """Read PNG or DICOM, normalize to [0,1], return (pixels, bits, view, vendor)."""
    with path.open("rb") as f:
        head = f.read(140)

    view = vendor = None
    if head.startswith(_PNG_MAGIC):
        raw, bit_depth = _read_png(path)
    elif len(head) >= 132 and head[128:132] == b"DICM":
        dicom = dicomlite.read_dicom(path)
        raw = dicom.pixels.astype(np.int64)
        bit_depth = dicom.bits_stored
        if dicom.photometric == "MONOCHROME1":
            raw = (2**bit_depth - 1) - raw
        view, vendor = dicom.view, dicom.vendor
    else:
        raise ImageFormatError(f"unrecognized image format: {path}")

    max_value = 2**bit_depth - 1
    if raw.min() < 0 or raw.max() > max_value:
        raise ImageFormatError("stored values exceed the declared bit depth")
    pixels = raw.astype(np.float64) / max_value
    if pixels.max() == pixels.min():
        raise DegenerateImageError(f"zero-variance image: {path}")
    return pixels, bit_depth, view, vendor


def load_pixels(path: str | Path) -> tuple[np.ndarray, int]:
    """Normalized [0,1] pixels and source bit depth, without metadata demands."""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"no such file: {path}")
    pixels, bit_depth, _, _ = _load_normalized(path)
    return pixels, bit_depth


def load_image(
    path: str | Path, view: str | None = None, vendor: str | None = None
) -> Mammogram:
    """Load a DICOM or PNG grayscale image into a normalized Mammogram.

    Pixels are divided by ``2**bit_depth - 1``. For DICOM, view and vendor
    default to the ViewPosition and Manufacturer tags; explicit arguments win.
    For PNG both must be supplied.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"no such file: {path}")
    pixels, bit_depth, file_view, file_vendor = _load_normalized(path)
    view = view or file_view
    vendor = vendor or file_vendor

    if view is None:
        raise ImageFormatError(f"view (CC/MLO) not in file metadata and not supplied: {path}")
    if vendor is None:
        raise ImageFormatError(f"vendor not in file metadata and not supplied: {path}")

    return Mammogram(
        pixels=pixels,
        view=view,
        vendor=vendor,
        breast_mask=compute_breast_mask(pixels),
        source_bit_depth=bit_depth,
    )


def save_image(m: Mammogram, path: str | Path, bit_depth: int = 16) -> None:
    """Quantize to ``bit_depth`` and write a grayscale PNG."""
    if bit_depth not in (8, 16):
        raise ImageFormatError("bit_depth must be 8 or 16")
    path = Path(path)
    max_value = 2**bit_depth - 1
    quantized = np.round(np.clip(m.pixels, 0.0, 1.0) * max_value)
    if bit_depth == 8:
        im = Image.fromarray(quantized.astype(np.uint8), mode="L")
    else:
        im = Image.fromarray(quantized.astype(np.uint16))
    try:
        im.save(path, format="PNG")
    except OSError as exc:
        raise ImageFormatError(f"cannot write {path}: {exc}") from exc


def save_array(pixels: np.ndarray, path: str | Path, bit_depth: int = 16) -> None:
    """Write a [0,1] array as PNG without constructing a full Mammogram."""
    stub = Mammogram(
        pixels=np.clip(pixels, 0.0, 1.0),
        view="CC",
        vendor="synthetic",
        breast_mask=np.zeros(np.asarray(pixels).shape, dtype=np.uint8),
        source_bit_depth=bit_depth,
    )
    save_image(stub, path, bit_depth=bit_depth)
