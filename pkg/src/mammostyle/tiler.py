"""Three-scale tile decomposition and blend-weighted reconstruction.

scale0 is the whole image as one tile, scale1 a 2x2 nominal grid, scale2 a
4x4 nominal grid. Tiles are cropped at full resolution, resized to a square
working size for transfer, and reassembled with per-pixel normalized blend
weights (linear feathering over the overlap bands).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MammostyleError

SCALES = ("scale0", "scale1", "scale2")
_DIVISORS = {"scale0": 1, "scale1": 2, "scale2": 4}

DEFAULT_WORK_SIZE = 512


class TilerError(MammostyleError):
    pass


@dataclass(frozen=True)
class TileGrid:
    """Decomposition descriptor for one scale.

    ``blend`` holds one weight map per position, already normalized so that
    at every image pixel the weights of all covering tiles sum to 1.
    """

    scale: str
    image_size: tuple[int, int]
    tile_size: tuple[int, int]
    overlap: int
    positions: tuple[tuple[int, int], ...]
    work_size: int
    blend: tuple[np.ndarray, ...]


def _axis_positions(length: int, tile: int, overlap: int) -> list[int]:
    stride = tile - overlap
    positions = list(range(0, length - tile + 1, stride))
    if positions[-1] != length - tile:
        positions.append(length - tile)  # clamp the last tile to the edge
    return positions


def _axis_profile(length: int, tile: int, pos: int, overlap: int, n_before: bool, n_after: bool) -> np.ndarray:
    profile = np.ones(tile, dtype=np.float64)
    if overlap > 0:
        ramp = (np.arange(overlap, dtype=np.float64) + 0.5) / overlap
        if n_before and pos > 0:
            profile[:overlap] *= ramp
        if n_after and pos + tile < length:
            profile[-overlap:] *= ramp[::-1]
    return profile


def plan_grid(
    image_size: tuple[int, int],
    scale: str,
    overlap: int = 0,
    work_size: int = DEFAULT_WORK_SIZE,
) -> TileGrid:
    """Plan tile positions and normalized blend weights for one scale.

    Tile sizes derive from the image: whole image for scale0, ceil(side/2) per
    axis for scale1, ceil(side/4) for scale2. Stride is tile size minus
    overlap, with the last tile clamped to the image edge, so the tile count
    grows beyond the nominal 1/4/16 when overlap > 0.
    """
    h, w = int(image_size[0]), int(image_size[1])
    if scale not in SCALES:
        raise TilerError(f"unknown scale {scale!r}")
    if h < 1 or w < 1:
        raise TilerError("empty image")
    if overlap < 0:
        raise TilerError("overlap must be >= 0")
    div = _DIVISORS[scale]
    if h < div or w < div:
        raise TilerError(f"image {h}x{w} smaller than the {scale} grid")

    if scale == "scale0":
        tile_h, tile_w = h, w
        positions = [(0, 0)]
        if overlap >= min(tile_h, tile_w) and overlap > 0:
            raise TilerError("overlap must be smaller than the tile size")
        blend = (np.ones((h, w), dtype=np.float64),)
        return TileGrid(scale, (h, w), (tile_h, tile_w), overlap, tuple(positions), work_size, blend)

    tile_h = -(-h // div)
    tile_w = -(-w // div)
    if overlap >= min(tile_h, tile_w):
        raise TilerError("overlap must be smaller than the tile size")

    rows = _axis_positions(h, tile_h, overlap)
    cols = _axis_positions(w, tile_w, overlap)
    positions = [(r, c) for r in rows for c in cols]

    raw_maps = []
    total = np.zeros((h, w), dtype=np.float64)
    for r, c in positions:
        pr = _axis_profile(h, tile_h, r, overlap, True, True)
        pc = _axis_profile(w, tile_w, c, overlap, True, True)
        m = np.outer(pr, pc)
        raw_maps.append(m)
        total[r : r + tile_h, c : c + tile_w] += m
    blend = tuple(
        m / total[r : r + tile_h, c : c + tile_w]
        for m, (r, c) in zip(raw_maps, positions)
    )
    return TileGrid(scale, (h, w), (tile_h, tile_w), overlap, tuple(positions), work_size, blend)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable half-pixel-centered bilinear resample in float64.

    Identity-size calls return an exact copy so no-resize configurations stay
    bit-exact through decompose/reconstruct.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        return lo, hi, frac

    r0, r1, fr = axis_coords(h, out_h)
    c0, c1, fc = axis_coords(w, out_w)
    rows = image[r0] * (1.0 - fr)[:, None] + image[r1] * fr[:, None]
    out = rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return out


def decompose(image: np.ndarray, grid: TileGrid) -> list[np.ndarray]:
    """Crop each planned tile and resize it to ``work_size`` squared."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != grid.image_size:
        raise TilerError(f"image shape {image.shape} does not match grid {grid.image_size}")
    th, tw = grid.tile_size
    ws = grid.work_size
    return [
        resize_bilinear(image[r : r + th, c : c + tw], ws, ws)
        for r, c in grid.positions
    ]


def reconstruct(tiles: list[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Resize tiles back to their crop size and blend into a full image."""
    if len(tiles) != len(grid.positions):
        raise TilerError(f"expected {len(grid.positions)} tiles, got {len(tiles)}")
    th, tw = grid.tile_size
    out = np.zeros(grid.image_size, dtype=np.float64)
    for tile, (r, c), weight in zip(tiles, grid.positions, grid.blend):
        tile = np.asarray(tile, dtype=np.float64)
        if tile.shape != (grid.work_size, grid.work_size):
            raise TilerError(f"tile shape {tile.shape} != work size {grid.work_size}")
        restored = resize_bilinear(tile, th, tw)
        out[r : r + th, c : c + tw] += weight * restored
    return out
