"""Reconstruction quality metrics and result tables.

All metrics operate in display space: images in [-1, 1] are mapped to
[0, 1] and clamped, so the peak signal for PSNR is 1. SSIM uses Gaussian
windowed statistics (sigma 1.5, 11x11 support) on the channel-mean
grayscale image, without the sample-covariance correction, and averages the
map away from a 5-pixel border where the window statistics are less
reliable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius round(3.5 * 1.5) = 5 -> 11-tap window
_SSIM_PAD = 5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def to_display(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] image data to the clamped [0, 1] display range."""
    return np.clip((np.asarray(image, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    da, db = to_display(a), to_display(b)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch {da.shape} vs {db.shape}")
    diff = da - db
    return float(np.mean(diff * diff))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over the [0, 1] display range.

    Identical images give ``inf``.
    """
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(err))


def _grayscale(image: np.ndarray) -> np.ndarray:
    img = to_display(image)
    if img.ndim == 3:
        return img.mean(axis=2)
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity of the grayscale views of two images."""
    x, y = _grayscale(a), _grayscale(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 2 * _SSIM_PAD + 1:
        raise ValueError("image too small for an 11x11 SSIM window")

    def smooth(im):
        return gaussian_filter(im, sigma=_SSIM_SIGMA, truncate=_SSIM_TRUNCATE)

    ux, uy = smooth(x), smooth(y)
    uxx, uyy, uxy = smooth(x * x), smooth(y * y), smooth(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy

    c1 = _SSIM_K1 * _SSIM_K1
    c2 = _SSIM_K2 * _SSIM_K2
    s = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    return float(s[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD].mean())


@dataclass
class MetricRecord:
    """One result row: a method at one guidance setting."""

    method: str
    omega1: float
    mse: float
    ssim: float
    psnr: float
    lpips: float | None = None  # requires a learned perceptual model; not computed
    clip_score: float | None = None  # requires a text-image model; not computed


def compare(method: str, omega1: float, recon: np.ndarray, ref: np.ndarray) -> MetricRecord:
    return MetricRecord(method, omega1, mse(recon, ref), ssim(recon, ref), psnr(recon, ref))


def _fmt(value: float | None, spec: str) -> str:
    if value is None:
        return "-"
    if np.isinf(value):
        return "inf"
    return format(value, spec)


def format_table(records: list[MetricRecord]) -> str:
    """Aligned text table, one row per record."""
    header = ["method", "omega1", "MSE", "SSIM", "PSNR", "LPIPS", "CLIP"]
    rows = [header]
    for r in records:
        rows.append(
            [
                r.method,
                _fmt(r.omega1, ".1f"),
                _fmt(r.mse, ".6f"),
                _fmt(r.ssim, ".4f"),
                _fmt(r.psnr, ".2f"),
                _fmt(r.lpips, ".4f"),
                _fmt(r.clip_score, ".4f"),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_report(records: list[MetricRecord], out_dir: str | Path) -> None:
    """Write ``report.json`` and ``table.txt`` for a set of result rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": 1,
        "records": [
            {
                "method": r.method,
                "omega1": r.omega1,
                "mse": r.mse,
                "ssim": r.ssim,
                "psnr": r.psnr,
                "lpips": r.lpips,
                "clip_score": r.clip_score,
            }
            for r in records
        ],
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    (out_dir / "table.txt").write_text(format_table(records))
