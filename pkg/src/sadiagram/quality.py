"""PSNR and SSIM on linear RGB in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .core import ImageBuffer, InvalidInputError

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, ImageBuffer) else img, dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` over all channels; identical inputs give the 99 dB cap."""
    m = mse(a, b)
    if m <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def _blur(x):
    # truncate chosen so the kernel radius is exactly SSIM_RADIUS
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect",
                                   truncate=(SSIM_RADIUS + 0.25) / SSIM_SIGMA)


def _ssim_channel(x, y, data_range):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    s = num / den
    pad = SSIM_RADIUS
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM (Gaussian 11x11, sigma 1.5), averaged over channels.

    The map is averaged over the interior where the window fits, as in the
    common reference implementations.
    """
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    if a.ndim == 2:
        return _ssim_channel(a, b, data_range)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], data_range)
                          for c in range(a.shape[2])]))
