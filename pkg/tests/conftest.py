"""Shared synthetic-image helpers for the test suite."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def smooth_texture(rng: np.random.Generator, size: int, sigma: float = 6.0) -> np.ndarray:
    """Random smooth texture mapped into [0.1, 0.9], full-field (no background)."""
    base = gaussian_filter(rng.random((size, size)), sigma)
    lo, hi = base.min(), base.max()
    return 0.1 + 0.8 * (base - lo) / (hi - lo)


def style_blur(image: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Style A: Gaussian-blurred rendering of a texture."""
    return np.clip(gaussian_filter(image, sigma), 0.0, 1.0)


def style_sharp(image: np.ndarray, sigma: float = 2.0, amount: float = 1.5) -> np.ndarray:
    """Style B: unsharp-masked rendering of a texture."""
    blurred = gaussian_filter(image, sigma)
    return np.clip(image + amount * (image - blurred), 0.0, 1.0)


def synthetic_breast(size: int, radius: int, intensity: float = 0.8) -> np.ndarray:
    """Filled bright disk centered in a dark field."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = size / 2 - 0.5
    img = np.zeros((size, size))
    img[(yy - c) ** 2 + (xx - c) ** 2 <= radius**2] = intensity
    return img
