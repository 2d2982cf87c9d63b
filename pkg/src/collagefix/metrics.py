"""Image quality metrics: SSIM and PSNR."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve

from .core import RasterImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 99.0


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _window_stats(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return convolve(x, window, mode="nearest")


def ssim(a: RasterImage, b: RasterImage) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on [0,1] values and averaged; the map is cropped to
    windows fully inside the image before averaging.
    """
    if a.shape != b.shape:
        raise ValueError(f"ssim dimension mismatch: {a.shape} vs {b.shape}")
    window = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    margin = SSIM_WINDOW // 2
    values = []
    for c in range(a.channels):
        x = a.data[..., c].astype(np.float64)
        y = b.data[..., c].astype(np.float64)
        mu_x = _window_stats(x, window)
        mu_y = _window_stats(y, window)
        var_x = _window_stats(x * x, window) - mu_x ** 2
        var_y = _window_stats(y * y, window) - mu_y ** 2
        cov = _window_stats(x * y, window) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        ssim_map = num / den
        if ssim_map.shape[0] > 2 * margin and ssim_map.shape[1] > 2 * margin:
            ssim_map = ssim_map[margin:-margin, margin:-margin]
        values.append(ssim_map.mean())
    return float(np.mean(values))


def psnr(a: RasterImage, b: RasterImage) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] images, capped at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"psnr dimension mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def mse(a: RasterImage, b: RasterImage) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mse dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
