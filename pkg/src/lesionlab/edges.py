"""Canny edge extraction on [0, 1] intensity patches.

The full classical chain: Gaussian smoothing (kernel truncated at 3 sigma),
Sobel gradients, non-maximum suppression along the quantized gradient
direction, then double-threshold hysteresis where weak pixels survive only
when 8-connected (possibly through other weak pixels) to a strong pixel.

Thresholds are absolute gradient magnitudes, not fractions of the per-image
maximum, so the detector behaves identically across patches.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ConfigError

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

# Quantized gradient directions: (dr, dc) stepping toward the positive
# gradient side. On magnitude plateaus the strict comparison against the
# positive neighbour keeps exactly one pixel, so a symmetric intensity step
# yields a single-pixel edge on its brighter side.
_DIRECTIONS = {
    0: (0, 1),   # gradient ~ horizontal, edge vertical
    1: (1, 1),   # gradient ~ 45 degrees
    2: (1, 0),   # gradient ~ vertical, edge horizontal
    3: (1, -1),  # gradient ~ 135 degrees
}


def smoothed_gradient(image: np.ndarray, sigma: float):
    """Gaussian-smooth then Sobel; returns (gx, gy, magnitude)."""
    if sigma <= 0:
        raise ConfigError(f"canny sigma must be > 0, got {sigma}")
    smoothed = ndimage.gaussian_filter(
        np.asarray(image, dtype=np.float64), sigma, mode="nearest", truncate=3.0
    )
    gx = ndimage.convolve(smoothed, SOBEL_X, mode="nearest")
    gy = ndimage.convolve(smoothed, SOBEL_Y, mode="nearest")
    return gx, gy, np.hypot(gx, gy)


def _quantize_direction(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(angle.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3
    return bins


def non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray):
    """Keep pixels that dominate their two neighbours along the gradient.

    Ties resolve toward the positive-direction neighbour (strict > forward,
    >= backward); border pixels are suppressed outright.
    """
    bins = _quantize_direction(gx, gy)
    out = np.zeros_like(mag)
    h, w = mag.shape
    if h < 3 or w < 3:
        return out
    core = np.s_[1 : h - 1, 1 : w - 1]
    for b, (dr, dc) in _DIRECTIONS.items():
        sel = bins[core] == b
        fwd = mag[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc]
        bwd = mag[1 - dr : h - 1 - dr, 1 - dc : w - 1 - dc]
        keep = sel & (mag[core] > fwd) & (mag[core] >= bwd)
        out[core][keep] = mag[core][keep]
    return out


def hysteresis(nms_mag: np.ndarray, low: float, high: float) -> np.ndarray:
    """Strong pixels seed; weak pixels survive via 8-connected chains."""
    strong = nms_mag >= high
    candidate = nms_mag >= low
    if not strong.any():
        return np.zeros(nms_mag.shape, dtype=np.uint8)
    labels, _ = ndimage.label(candidate, structure=np.ones((3, 3), dtype=bool))
    keep_ids = np.unique(labels[strong])
    keep_ids = keep_ids[keep_ids > 0]
    return np.isin(labels, keep_ids).astype(np.uint8)


def canny(patch: np.ndarray, sigma: float = 1.0, low: float = 0.1,
          high: float = 0.2) -> np.ndarray:
    """Binary {0, 1} edge mask of a [0, 1] intensity patch."""
    if not 0.0 < low < high:
        raise ConfigError(
            f"canny thresholds must satisfy 0 < low < high, got low={low} high={high}"
        )
    gx, gy, mag = smoothed_gradient(patch, sigma)
    nms = non_maximum_suppression(mag, gx, gy)
    return hysteresis(nms, low, high)
