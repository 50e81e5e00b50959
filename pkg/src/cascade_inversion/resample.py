"""Integer-factor resampling for (H, W, C) float64 images."""

from __future__ import annotations

import numpy as np


def _check_factor(factor: int) -> None:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")


def upsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    _check_factor(factor)
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def upsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel (align_corners=False) sampling."""
    _check_factor(factor)
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]

    def axis_weights(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # Source coordinate of each output pixel centre, clipped to the grid.
        src = (np.arange(n * factor, dtype=np.float64) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n - 2) if n > 1 else lo
        frac = src - lo
        return lo, lo + (1 if n > 1 else 0), frac

    ylo, yhi, fy = axis_weights(h)
    xlo, xhi, fx = axis_weights(w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[ylo][:, xlo] * (1 - fx) + img[ylo][:, xhi] * fx
    bot = img[yhi][:, xlo] * (1 - fx) + img[yhi][:, xhi] * fx
    return top * (1 - fy) + bot * fy


def downsample_area(img: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks."""
    _check_factor(factor)
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image size {(h, w)} not divisible by factor {factor}")
    c = img.shape[2]
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
